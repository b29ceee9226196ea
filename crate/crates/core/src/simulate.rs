//! Unconditional simulation of Gaussian and scale-mixture fields.
//!
//! Every realization `i` draws from its own ChaCha stream `(seed, i)`: first
//! the `J` standard normals, then (scale mixtures only) the value of `V`.
//! Ensembles are therefore reproducible under any thread schedule, and a
//! Gaussian and a scale-mixture ensemble generated with the same seed share
//! their latent Gaussian draws.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgf::DependenceSpec;
use crate::covmodel::SiteSet;
use crate::error::{Error, Result};

/// Default cap on dense-Cholesky grid sizes (about 100×100).
pub const DEFAULT_GRID_CAP: usize = 10_000;

/// Realizations generated per block; each block is one matrix product.
const BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    #[serde(default)]
    pub origin: [f64; 2],
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, spacing: f64) -> Self {
        Self {
            nx,
            ny,
            spacing,
            origin: [0.0, 0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major enumeration: site `k` sits at column `k % nx`, row `k / nx`.
pub fn grid_spec_to_sites(grid: &GridSpec, cap: usize) -> Result<SiteSet> {
    if grid.nx == 0 || grid.ny == 0 || !(grid.spacing > 0.0) {
        return Err(Error::Input("grid needs positive dimensions and spacing".into()));
    }
    let n = grid.nx.checked_mul(grid.ny).unwrap_or(usize::MAX);
    if n > cap {
        return Err(Error::Size(format!(
            "grid {}x{} has {n} sites, above the cap of {cap}",
            grid.nx, grid.ny
        )));
    }
    let coords = (0..n)
        .map(|k| {
            [
                grid.origin[0] + (k % grid.nx) as f64 * grid.spacing,
                grid.origin[1] + (k / grid.nx) as f64 * grid.spacing,
            ]
        })
        .collect();
    SiteSet::new(coords)
}

/// `j` distinct cells of `grid`, drawn uniformly without replacement and
/// kept in draw order.
pub fn random_grid_sites(grid: &GridSpec, j: usize, seed: u64) -> Result<SiteSet> {
    let all = grid_spec_to_sites(grid, usize::MAX)?;
    if j == 0 || j > all.len() {
        return Err(Error::Input(format!("cannot pick {j} sites from a grid of {}", all.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, all.len(), j);
    all.subset(&picks.into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Gaussian,
    Scalemix,
}

/// `n × J` field values, one row per realization.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    n: usize,
    cols: usize,
    values: Vec<f64>,
    kind: FieldKind,
    v_draws: Option<Vec<f64>>,
    sites: Option<SiteSet>,
}

impl SampleMatrix {
    /// Builds a Gaussian-tagged (or scale-mixture, if `v_draws` is given)
    /// matrix from row-major values.
    pub fn new(n: usize, cols: usize, values: Vec<f64>, v_draws: Option<Vec<f64>>) -> Result<Self> {
        if values.len() != n * cols {
            return Err(Error::Input(format!(
                "{} values do not fill a {n}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(v) = &v_draws {
            if v.len() != n {
                return Err(Error::Input(format!("{} V draws for {n} rows", v.len())));
            }
        }
        let kind = if v_draws.is_some() {
            FieldKind::Scalemix
        } else {
            FieldKind::Gaussian
        };
        Ok(Self {
            n,
            cols,
            values,
            kind,
            v_draws,
            sites: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat(), None)
    }

    pub fn with_sites(mut self, sites: SiteSet) -> Result<Self> {
        if sites.len() != self.cols {
            return Err(Error::Input(format!(
                "{} sites for a matrix with {} columns",
                sites.len(),
                self.cols
            )));
        }
        self.sites = Some(sites);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn v_draws(&self) -> Option<&[f64]> {
        self.v_draws.as_deref()
    }

    pub fn sites(&self) -> Option<&SiteSet> {
        self.sites.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.n)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Keeps the listed columns in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Input(format!("column {bad} out of range")));
        }
        let values = self
            .rows()
            .flat_map(|r| cols.iter().map(move |&c| r[c]))
            .collect();
        let mut out = Self::new(self.n, cols.len(), values, self.v_draws.clone())?;
        if let Some(s) = &self.sites {
            out.sites = Some(s.subset(cols)?);
        }
        Ok(out)
    }

    pub(crate) fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let cols = self.cols;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / cols, k % cols, v))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

/// RNG for realization `index` of the ensemble seeded by `seed`.
pub fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `n` realizations; returns row-major `μ + s_i · L ε_i` and the `V`
/// draws when `scale` is set.
fn simulate(spec: &DependenceSpec, n: usize, seed: u64, scale: bool) -> (Vec<f64>, Option<Vec<f64>>) {
    let j = spec.dim();
    let l = spec.cholesky().l();
    let mu = spec.mu();
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let rows = BLOCK.min(n - start);
            let mut eps = DMatrix::<f64>::zeros(j, rows);
            let mut v = Vec::with_capacity(rows);
            for r in 0..rows {
                let mut rng = realization_rng(seed, (start + r) as u64);
                for k in 0..j {
                    eps[(k, r)] = StandardNormal.sample(&mut rng);
                }
                v.push(if scale { spec.mixture().sample(&mut rng) } else { 1.0 });
            }
            let z = l * eps;
            let mut out = Vec::with_capacity(rows * j);
            for r in 0..rows {
                let s = v[r].sqrt();
                out.extend((0..j).map(|k| mu[k] + s * z[(k, r)]));
            }
            (out, v)
        })
        .collect();
    let mut values = Vec::with_capacity(n * j);
    let mut v_all = Vec::with_capacity(n);
    for (vals, v) in blocks {
        values.extend(vals);
        v_all.extend(v);
    }
    (values, scale.then_some(v_all))
}

fn attach_sites(m: SampleMatrix, spec: &DependenceSpec) -> SampleMatrix {
    match spec.sites() {
        Some(s) => m.with_sites(s.clone()).expect("site count matches dimension"),
        None => m,
    }
}

/// `n` rows of `μ + L ε`.
pub fn sample_gaussian(spec: &DependenceSpec, n: usize, seed: u64) -> SampleMatrix {
    let (values, _) = simulate(spec, n, seed, false);
    attach_sites(SampleMatrix::new(n, spec.dim(), values, None).unwrap(), spec)
}

/// `n` rows of `μ + √v_i · L ε_i`, one `V` per realization.
pub fn sample_field(spec: &DependenceSpec, n: usize, seed: u64) -> SampleMatrix {
    let (values, v) = simulate(spec, n, seed, true);
    attach_sites(SampleMatrix::new(n, spec.dim(), values, v).unwrap(), spec)
}

/// Outcome of comparing a `J`-site ensemble with the shared columns of a
/// `(J+1)`-site ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub n: usize,
    pub dim: usize,
    pub statistics: usize,
    /// Largest `|mean_J − mean_{J+1}| / se` over all compared statistics.
    pub max_standardized_discrepancy: f64,
    pub worst_statistic: String,
}

impl ConsistencyReport {
    pub fn within(&self, n_se: f64) -> bool {
        self.max_standardized_discrepancy <= n_se
    }
}

fn mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    (mean, if n > 1 { m2 / (n - 1) as f64 } else { 0.0 }, n)
}

/// Simulates the model and a one-site extension of it and compares the
/// empirical second moments `E(X_a X_b)` and fourth moments `E(X_a² X_b²)`
/// of the shared components.
pub fn marginalize_check(spec: &DependenceSpec, n: usize, seed: u64) -> Result<ConsistencyReport> {
    let dim = spec.dim();
    if dim < 2 {
        return Err(Error::Input("consistency check needs at least two sites".into()));
    }
    let (sites, cov) = match (spec.sites(), spec.cov_model()) {
        (Some(s), Some(c)) => (s, c),
        _ => {
            return Err(Error::Input(
                "consistency check needs a model with site geometry".into(),
            ))
        }
    };
    let max_x = sites.coords().iter().map(|c| c[0]).fold(f64::MIN, f64::max);
    let mean_y = sites.coords().iter().map(|c| c[1]).sum::<f64>() / dim as f64;
    let extra = SiteSet::new(vec![[max_x + cov.theta1 * 0.25, mean_y]])?;
    let ext_sites = sites.union(&extra, false)?;
    let mut mu = spec.mu().to_vec();
    mu.push(spec.mean_model().intercept);
    let sigma = crate::covmodel::cov_matrix(cov, &ext_sites)?;
    let ext = DependenceSpec::from_covariance(sigma, mu, spec.mixture().clone())?;

    let base = sample_field(spec, n, seed);
    let wide = sample_field(&ext, n, seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    let mu = spec.mu();

    let mut worst = (0.0, String::new());
    let mut count = 0;
    for a in 0..dim {
        for b in a..dim {
            for (label, power) in [("E[X_a X_b]", 1), ("E[X_a^2 X_b^2]", 2)] {
                let stat = |m: &SampleMatrix| {
                    mean_var(m.rows().map(|r| ((r[a] - mu[a]) * (r[b] - mu[b])).powi(power)))
                };
                let (m1, v1, n1) = stat(&base);
                let (m2, v2, n2) = stat(&wide);
                let se = (v1 / n1 as f64 + v2 / n2 as f64).sqrt();
                let z = if se > 0.0 { (m1 - m2).abs() / se } else { 0.0 };
                count += 1;
                if z > worst.0 || worst.1.is_empty() {
                    worst = (z, format!("{label} a={a} b={b}"));
                }
            }
        }
    }
    Ok(ConsistencyReport {
        n,
        dim,
        statistics: count,
        max_standardized_discrepancy: worst.0,
        worst_statistic: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{CovModel, MeanModel};
    use crate::mixture::GammaMixture;

    fn line_spec(j: usize, mix: GammaMixture) -> DependenceSpec {
        let sites = SiteSet::new((0..j).map(|k| [k as f64 * 3.0, 0.0]).collect()).unwrap();
        DependenceSpec::new(sites, CovModel::exponential(5.0, 1.0).unwrap(), MeanModel::default(), &[], mix)
            .unwrap()
    }

    #[test]
    fn grid_enumeration() {
        let s = grid_spec_to_sites(&GridSpec::new(2, 2, 1.0), DEFAULT_GRID_CAP).unwrap();
        assert_eq!(s.coords(), &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let mut g = GridSpec::new(1, 1, 2.0);
        g.origin = [3.0, 4.0];
        assert_eq!(grid_spec_to_sites(&g, DEFAULT_GRID_CAP).unwrap().coords(), &[[3.0, 4.0]]);
        assert!(matches!(
            grid_spec_to_sites(&GridSpec::new(101, 100, 1.0), DEFAULT_GRID_CAP),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn single_site_variance() {
        let spec = line_spec(1, GammaMixture::degenerate());
        let m = sample_gaussian(&spec, 100_000, 5);
        let col = m.column(0);
        let (_, var, _) = mean_var(col.into_iter());
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn tiny_covariance_concentrates_on_mean() {
        let sigma = DMatrix::identity(3, 3) * 1e-16;
        let spec = DependenceSpec::from_covariance(sigma, vec![5.0; 3], GammaMixture::degenerate()).unwrap();
        let m = sample_gaussian(&spec, 50, 1);
        assert!(m.values().iter().all(|v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn reproducible_and_shared_draws() {
        let spec = line_spec(4, GammaMixture::reference().normalized());
        assert_eq!(sample_field(&spec, 130, 9), sample_field(&spec, 130, 9));
        let g = sample_gaussian(&spec, 130, 9);
        let x = sample_field(&spec, 130, 9);
        assert_eq!(x.kind(), FieldKind::Scalemix);
        assert_eq!(g.kind(), FieldKind::Gaussian);
        let v = x.v_draws().unwrap();
        for i in 0..130 {
            for j in 0..4 {
                let want = v[i].sqrt() * g.get(i, j);
                assert!((x.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        let degenerate = spec.with_mixture(GammaMixture::degenerate()).unwrap();
        let xd = sample_field(&degenerate, 130, 9);
        let max_diff = xd
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-3, "{max_diff}");
    }

    #[test]
    fn empirical_covariance_matches_sigma() {
        let spec = line_spec(5, GammaMixture::reference().normalized());
        let n = 1_000_000;
        let x = sample_field(&spec, n, 77);
        for a in 0..5 {
            for b in a..5 {
                let (m, v, _) = mean_var(x.rows().map(|r| r[a] * r[b]));
                let se = (v / n as f64).sqrt();
                assert!(
                    (m - spec.sigma()[(a, b)]).abs() <= 3.0 * se,
                    "({a},{b}) {m} vs {} se {se}",
                    spec.sigma()[(a, b)]
                );
            }
        }
    }

    #[test]
    fn v_draws_audit() {
        let spec = line_spec(3, GammaMixture::reference().normalized());
        let g = sample_gaussian(&spec, 20, 4);
        let x = sample_field(&spec, 20, 4);
        for i in 0..20 {
            let ratio = x.get(i, 0) / g.get(i, 0);
            assert!((ratio * ratio - x.v_draws().unwrap()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn consistency_smoke() {
        let spec = line_spec(3, GammaMixture::reference().normalized());
        let r = marginalize_check(&spec, 10, 1).unwrap();
        assert!(r.max_standardized_discrepancy.is_finite());
        assert_eq!(r.statistics, 12);
        let flat = DependenceSpec::from_covariance(DMatrix::identity(2, 2), vec![0.0; 2], GammaMixture::degenerate())
            .unwrap();
        assert!(marginalize_check(&flat, 10, 1).is_err());
    }

    #[test]
    fn consistency_gaussian_and_mixture() {
        for mix in [GammaMixture::degenerate(), GammaMixture::reference().normalized()] {
            let spec = line_spec(4, mix);
            let r = marginalize_check(&spec, 50_000, 21).unwrap();
            assert!(r.within(3.0), "{r:?}");
        }
    }
}
