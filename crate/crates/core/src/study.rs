//! Fixed design of the synthetic study: an exponential covariance with
//! range 20 and unit sill on a grid, 30 stations, the reference mixture,
//! and the seven-station conditioning example.

use serde::Serialize;

use crate::cgf::DependenceSpec;
use crate::conditional::{ConditioningSet, SaddlepointInterpolator};
use crate::covmodel::{CovModel, MeanModel, SiteSet};
use crate::diagnostics::{exceedance_sums, quantile_match, quantile_table, threshold_counts, QuantileTable};
use crate::error::{Error, Result};
use crate::estimate::{estimate_all, EstimationConfig, EstimationResult};
use crate::mixture::GammaMixture;
use crate::simulate::{grid_spec_to_sites, random_grid_sites, sample_field, sample_gaussian, GridSpec, SampleMatrix};
use crate::special::norm_quantile;

pub const RANGE: f64 = 20.0;
pub const SILL: f64 = 1.0;
pub const N_STATIONS: usize = 30;
/// Seed of the uniform station layout (the original coordinates were never
/// published).
pub const LAYOUT_SEED: u64 = 20;
pub const GRID_SIDE: usize = 64;
pub const N_DAYS: usize = 3650;

/// Station labels (1-based) of the conditioning example; the first is the
/// target, the others are conditioned on in this order.
pub const COND_STATIONS: [usize; 7] = [3, 28, 19, 16, 25, 9, 21];
/// Latent Gaussian values at [`COND_STATIONS`].
pub const COND_Z: [f64; 7] = [-1.489, -0.626, -0.050, 0.068, 0.491, 0.832, -0.666];
/// Values of `√V` applied to [`COND_Z`].
pub const COND_SCALINGS: [f64; 3] = [0.64, 1.0, 2.0];
pub const COND_COUNTS: [usize; 4] = [1, 2, 4, 6];
pub const COND_PERCENTILES: [f64; 8] = [0.8, 0.9, 0.95, 0.99, 0.995, 0.999, 0.9999, 0.99999];

pub fn covariance() -> CovModel {
    CovModel::exponential(RANGE, SILL).expect("valid study covariance")
}

pub fn grid(side: usize) -> GridSpec {
    GridSpec::new(side, side, 1.0)
}

/// The 30 stations on the default grid.
pub fn stations() -> SiteSet {
    random_grid_sites(&grid(GRID_SIDE), N_STATIONS, LAYOUT_SEED).expect("grid holds the stations")
}

/// Unit-mean version of the reference mixture.
pub fn mixture() -> GammaMixture {
    GammaMixture::reference().normalized()
}

/// Zero-mean field model at the stations.
pub fn station_spec(mix: GammaMixture) -> Result<DependenceSpec> {
    DependenceSpec::new(stations(), covariance(), MeanModel::default(), &[], mix)
}

/// Conditioning on the first `count` conditioning stations with values
/// `scaling · z`, targeting the first station's location.
pub fn conditioning(scaling: f64, count: usize) -> Result<ConditioningSet> {
    if !(1..COND_STATIONS.len()).contains(&count) {
        return Err(Error::Input(format!("between 1 and 6 conditioning values, got {count}")));
    }
    let sites = stations();
    let target = sites.subset(&[COND_STATIONS[0] - 1])?;
    let idx = COND_STATIONS[1..=count].iter().map(|s| s - 1).collect();
    let values = COND_Z[1..=count].iter().map(|z| scaling * z).collect();
    ConditioningSet::new(idx, values, target)
}

/// Default number of realizations of the gridded fields.
pub const DESK_REALIZATIONS: usize = 2000;
pub const SUM_PROBS: [f64; 7] = [0.8, 0.9, 0.95, 0.99, 0.995, 0.999, 1.0];
pub const COUNT_THRESHOLDS: [f64; 2] = [1.28, 2.5];

/// Gaussian and scale-mixture ensembles built from the same latent draws,
/// plus the quantile-matched field.
#[derive(Debug, Clone)]
pub struct FieldTriple {
    pub gaussian: SampleMatrix,
    pub scalemix: SampleMatrix,
    pub matched: SampleMatrix,
}

/// Zero-mean model on a `side × side` unit grid.
pub fn grid_spec(side: usize, cap: usize, mix: GammaMixture) -> Result<DependenceSpec> {
    let sites = grid_spec_to_sites(&grid(side), cap)?;
    DependenceSpec::new(sites, covariance(), MeanModel::default(), &[], mix)
}

/// `n` realizations of each field on the grid, sharing one seed.
pub fn simulate_fields(spec: &DependenceSpec, n: usize, seed: u64) -> Result<FieldTriple> {
    let gaussian = sample_gaussian(spec, n, seed);
    let scalemix = sample_field(spec, n, seed);
    let matched = quantile_match(&scalemix, &gaussian)?;
    Ok(FieldTriple {
        gaussian,
        scalemix,
        matched,
    })
}

/// Quantiles of the sum of positive values, with percentage increases of
/// the scale-mixture and matched fields over the Gaussian one.
pub fn sum_tables(fields: &FieldTriple, probs: &[f64]) -> Result<[QuantileTable; 3]> {
    let g = quantile_table(&exceedance_sums(&fields.gaussian, 0.0), probs, None)?;
    let x = quantile_table(&exceedance_sums(&fields.scalemix, 0.0), probs, Some(&g))?;
    let w = quantile_table(&exceedance_sums(&fields.matched, 0.0), probs, Some(&g))?;
    Ok([g, x, w])
}

/// Mean, standard error and per-realization values of a threshold count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountSummary {
    pub threshold: f64,
    pub mean: f64,
    pub se: f64,
    pub counts: Vec<usize>,
}

pub fn count_summary(data: &SampleMatrix, a: f64) -> CountSummary {
    let counts = threshold_counts(data, a);
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    CountSummary {
        threshold: a,
        mean,
        se: (var / n).sqrt(),
        counts,
    }
}

/// Moment and cumulant estimates from station data of both fields.
#[derive(Debug, Clone, Serialize)]
pub struct MomentTable {
    pub gaussian: EstimationResult,
    pub scalemix: EstimationResult,
}

/// `N_DAYS` realizations at the stations for each field, then the full
/// estimation pipeline on both.
pub fn moment_table(seed: u64, cfg: &EstimationConfig) -> Result<MomentTable> {
    let spec = station_spec(mixture())?;
    let sites = stations();
    let gaussian = estimate_all(&sample_gaussian(&spec, N_DAYS, seed), &sites, cfg)?;
    let scalemix = estimate_all(&sample_field(&spec, N_DAYS, seed), &sites, cfg)?;
    Ok(MomentTable { gaussian, scalemix })
}

/// One point of a conditional quantile curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub scaling: f64,
    pub count: usize,
    pub prob: f64,
    /// Saddlepoint quantile under the scale-mixture model.
    pub scalemix: f64,
    /// Quantile of the Gaussian conditional.
    pub gaussian: f64,
}

/// Conditional quantiles at the target station for every scaling and
/// number of conditioning values.
pub fn conditional_curves(mix: &GammaMixture, scalings: &[f64], counts: &[usize], probs: &[f64]) -> Result<Vec<CurvePoint>> {
    let spec = station_spec(mix.clone())?;
    let mut out = Vec::new();
    for &scaling in scalings {
        for &count in counts {
            let interp = SaddlepointInterpolator::new(&spec, &conditioning(scaling, count)?)?;
            let (m, s) = interp.kriging();
            for &prob in probs {
                out.push(CurvePoint {
                    scaling,
                    count,
                    prob,
                    scalemix: interp.quantile(prob)?,
                    gaussian: m + s * norm_quantile(prob),
                });
            }
        }
    }
    Ok(out)
}
