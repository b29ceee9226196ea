//! Interaction manifestations of a field ensemble: exceedance counts and
//! sums, congregation entropy of joint exceedance indicators, parametric
//! bootstrap bands and quantile tables.

use rayon::prelude::*;
use serde::Serialize;

use crate::cgf::DependenceSpec;
use crate::error::{Error, Result};
use crate::simulate::{sample_gaussian, SampleMatrix};

/// Largest number of columns in a congregation measure (`2^K` cells).
pub const MAX_CONGREGATION_DIM: usize = 16;
/// Below this many rows the entropy estimate is flagged as unreliable.
pub const MIN_CONGREGATION_ROWS: usize = 50;
pub const DEFAULT_BOOTSTRAP_REPS: usize = 1000;

/// `#{j : x_j > a}`.
pub fn threshold_count(row: &[f64], a: f64) -> usize {
    row.iter().filter(|&&x| x > a).count()
}

/// `Σ_j x_j 1{x_j > a}`.
pub fn exceedance_sum(row: &[f64], a: f64) -> f64 {
    row.iter().filter(|&&x| x > a).sum()
}

/// Per-realization threshold counts.
pub fn threshold_counts(data: &SampleMatrix, a: f64) -> Vec<usize> {
    data.rows().map(|r| threshold_count(r, a)).collect()
}

/// Per-realization exceedance sums.
pub fn exceedance_sums(data: &SampleMatrix, a: f64) -> Vec<f64> {
    data.rows().map(|r| exceedance_sum(r, a)).collect()
}

/// Empirical CDF values `#{x ≤ x_i} / (n + 1)` of one column.
pub fn ecdf_ranks(column: &[f64]) -> Vec<f64> {
    let n = column.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut k = i;
        while k + 1 < n && column[order[k + 1]] == column[order[i]] {
            k += 1;
        }
        // Ties share the count of values at or below them.
        let f = (k + 1) as f64 / (n + 1) as f64;
        for &idx in &order[i..=k] {
            out[idx] = f;
        }
        i = k + 1;
    }
    out
}

/// Entropy (nats) of the joint distribution of the indicators
/// `F_j(X_j) > b` over the selected columns.
pub fn congregation_entropy(data: &SampleMatrix, indices: &[usize], b: f64) -> Result<f64> {
    let k = indices.len();
    if k == 0 {
        return Err(Error::Input("congregation needs at least one column".into()));
    }
    if k > MAX_CONGREGATION_DIM {
        return Err(Error::Size(format!(
            "congregation over {k} columns; at most {MAX_CONGREGATION_DIM} supported"
        )));
    }
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::Domain(format!("percentile {b} must lie in (0, 1)")));
    }
    if let Some(&j) = indices.iter().find(|&&j| j >= data.ncols()) {
        return Err(Error::Input(format!("column {j} out of range")));
    }
    let n = data.nrows();
    if n == 0 {
        return Err(Error::Input("no realizations".into()));
    }
    let mut cell = vec![0u32; n];
    for (bit, &j) in indices.iter().enumerate() {
        for (c, f) in cell.iter_mut().zip(ecdf_ranks(&data.column(j))) {
            if f > b {
                *c |= 1 << bit;
            }
        }
    }
    let mut counts = vec![0usize; 1 << k];
    for c in cell {
        counts[c as usize] += 1;
    }
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioPoint {
    pub b: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// `numerator / denominator`, `+∞` when the denominator vanishes.
    pub ratio: f64,
    pub zero_denominator: bool,
}

/// `congr_b(A) / congr_b(B)` for each percentile.
pub fn congregation_ratio(
    data_a: &SampleMatrix,
    data_b: &SampleMatrix,
    indices: &[usize],
    b_list: &[f64],
) -> Result<Vec<RatioPoint>> {
    b_list
        .iter()
        .map(|&b| {
            let numerator = congregation_entropy(data_a, indices, b)?;
            let denominator = congregation_entropy(data_b, indices, b)?;
            let zero = denominator == 0.0;
            Ok(RatioPoint {
                b,
                numerator,
                denominator,
                ratio: if zero { f64::INFINITY } else { numerator / denominator },
                zero_denominator: zero,
            })
        })
        .collect()
}

/// Order statistic of rank `max(1, ⌈p n⌉)` from sorted values.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Pointwise band from a parametric bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub reps: usize,
    pub probs: (f64, f64),
}

/// Simulates `reps` Gaussian datasets of `n` rows from `spec`, applies
/// `statistic` to each and returns nearest-rank quantiles of every output
/// coordinate.
pub fn bootstrap_band<F>(
    spec: &DependenceSpec,
    n: usize,
    reps: usize,
    statistic: F,
    probs: (f64, f64),
    seed: u64,
) -> Result<Band>
where
    F: Fn(&SampleMatrix) -> Vec<f64> + Sync,
{
    if reps == 0 || n == 0 {
        return Err(Error::Input("bootstrap needs at least one replicate of one row".into()));
    }
    if !(0.0 <= probs.0 && probs.0 <= probs.1 && probs.1 <= 1.0) {
        return Err(Error::Domain(format!("invalid band probabilities {probs:?}")));
    }
    let stats: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| statistic(&sample_gaussian(spec, n, seed.wrapping_add(r as u64))))
        .collect();
    let width = stats[0].len();
    if stats.iter().any(|s| s.len() != width) {
        return Err(Error::Input("statistic returned vectors of differing length".into()));
    }
    let mut lower = Vec::with_capacity(width);
    let mut upper = Vec::with_capacity(width);
    for c in 0..width {
        let mut col: Vec<f64> = stats.iter().map(|s| s[c]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(nearest_rank(&col, probs.0));
        upper.push(nearest_rank(&col, probs.1));
    }
    Ok(Band {
        lower,
        upper,
        reps,
        probs,
    })
}

/// Empirical CDF of `values` evaluated at the `points`.
pub fn ecdf_at(values: &[f64], points: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    points
        .iter()
        .map(|&p| sorted.partition_point(|&v| v <= p) as f64 / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRow {
    pub prob: f64,
    pub value: f64,
    /// Percentage increase over the baseline quantile at the same level.
    pub rel_increase: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileTable {
    pub rows: Vec<QuantileRow>,
}

/// Nearest-rank quantiles, optionally compared with a baseline table over
/// the same probabilities.
pub fn quantile_table(values: &[f64], probs: &[f64], baseline: Option<&QuantileTable>) -> Result<QuantileTable> {
    if values.is_empty() {
        return Err(Error::Input("quantiles of an empty sample".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if let Some(base) = baseline {
        if base.rows.len() != probs.len() || base.rows.iter().zip(probs).any(|(r, p)| r.prob != *p) {
            return Err(Error::Input("baseline table uses different probabilities".into()));
        }
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rows = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let value = nearest_rank(&sorted, p);
            let rel_increase = baseline.map(|b| {
                let base = b.rows[i].value;
                100.0 * (value - base) / base.abs()
            });
            QuantileRow {
                prob: p,
                value,
                rel_increase,
            }
        })
        .collect();
    Ok(QuantileTable { rows })
}

/// Maps each column of `x` onto the empirical quantiles of the matching
/// column of `z`: `W_j = F̂_{Z_j}⁻¹(F̂_{X_j}(X_j))`.
pub fn quantile_match(x: &SampleMatrix, z: &SampleMatrix) -> Result<SampleMatrix> {
    if x.nrows() != z.nrows() || x.ncols() != z.ncols() {
        return Err(Error::Input(format!(
            "shapes differ: {}x{} against {}x{}",
            x.nrows(),
            x.ncols(),
            z.nrows(),
            z.ncols()
        )));
    }
    let n = x.nrows();
    let mut values = vec![0.0; n * x.ncols()];
    for j in 0..x.ncols() {
        let xc = x.column(j);
        let mut zs = z.column(j);
        zs.sort_by(f64::total_cmp);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| xc[a].total_cmp(&xc[b]).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            values[i * x.ncols() + j] = zs[rank];
        }
    }
    let mut w = SampleMatrix::new(n, x.ncols(), values, None)?;
    if let Some(s) = x.sites() {
        w = w.with_sites(s.clone())?;
    }
    Ok(w)
}

/// A named statistic with optional thresholds, values and band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub statistic: String,
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub band: Option<Band>,
}
