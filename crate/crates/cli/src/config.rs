//! Run configuration (TOML). The grammar is documented in the README.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use scalemix::conditional::McmcConfig;
use scalemix::covmodel::{CovKind, CovModel, MeanModel};
use scalemix::estimate::{EstimationConfig, OptimizerConfig};
use scalemix::mixture::GammaMixture;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sites: Option<SitesConfig>,
    pub covariance: Option<CovModel>,
    #[serde(default)]
    pub mean: MeanModel,
    pub mixture: Option<MixtureConfig>,
    pub simulate: Option<SimulateConfig>,
    pub estimate: Option<EstimateConfig>,
    pub interpolate: Option<InterpolateConfig>,
    pub condsim: Option<CondsimConfig>,
    pub diagnose: Option<DiagnoseConfig>,
    pub reproduce: Option<ReproduceConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub spacing: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SitesConfig {
    pub grid: Option<GridConfig>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MixtureConfig {
    /// No scaling variable: a Gaussian field.
    Gaussian,
    /// The reference five-component mixture, rescaled to unit mean.
    Reference,
    Custom {
        weights: Vec<f64>,
        shapes: Vec<f64>,
        scales: Vec<f64>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldChoice {
    Gaussian,
    Scalemix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub field: Option<FieldChoice>,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: PathBuf,
    #[serde(default = "five")]
    pub k: usize,
    #[serde(default = "five")]
    pub s: usize,
    #[serde(default = "default_kind")]
    pub cov_kind: CovKind,
    pub restarts: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

fn five() -> usize {
    5
}

fn default_kind() -> CovKind {
    CovKind::PoweredExponential
}

/// Evaluation levels: an explicit list or an even grid.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelGrid {
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateConfig {
    pub observations: PathBuf,
    pub target: [f64; 2],
    #[serde(default)]
    pub target_covariates: Vec<f64>,
    pub levels: Option<Vec<f64>>,
    pub grid: Option<LevelGrid>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    #[serde(default = "burn_in")]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub proposal_sd: f64,
    #[serde(default = "thin")]
    pub thin: usize,
}

fn burn_in() -> usize {
    500
}

fn thin() -> usize {
    1
}

impl Default for McmcSection {
    fn default() -> Self {
        Self {
            burn_in: burn_in(),
            proposal_sd: 1.0,
            thin: 1,
        }
    }
}

impl McmcSection {
    pub fn to_mcmc(&self, samples: usize, seed: u64) -> McmcConfig {
        McmcConfig {
            burn_in: self.burn_in,
            samples,
            proposal_sd: self.proposal_sd,
            thin: self.thin,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondsimConfig {
    pub observations: PathBuf,
    pub targets: PathBuf,
    pub b: usize,
    #[serde(default)]
    pub mcmc: McmcSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Count,
    Sum,
    Congregation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: PathBuf,
    pub baseline: Option<PathBuf>,
    pub statistic: Statistic,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "sum_probs")]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub indices: Vec<usize>,
    #[serde(default)]
    pub percentiles: Vec<f64>,
    #[serde(default)]
    pub bootstrap_reps: usize,
    #[serde(default = "band")]
    pub band: [f64; 2],
}

fn sum_probs() -> Vec<f64> {
    scalemix::study::SUM_PROBS.to_vec()
}

fn band() -> [f64; 2] {
    [0.025, 0.975]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    #[serde(default = "side")]
    pub side: usize,
    #[serde(default = "realizations")]
    pub n: usize,
    #[serde(default = "estimation_runs")]
    pub estimation_runs: usize,
    #[serde(default = "sum_probs")]
    pub sum_probs: Vec<f64>,
    #[serde(default = "thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "scalings")]
    pub scalings: Vec<f64>,
    #[serde(default = "counts")]
    pub counts: Vec<usize>,
    #[serde(default = "percentiles")]
    pub percentiles: Vec<f64>,
}

fn side() -> usize {
    scalemix::study::GRID_SIDE
}

fn realizations() -> usize {
    scalemix::study::DESK_REALIZATIONS
}

fn estimation_runs() -> usize {
    3
}

fn thresholds() -> Vec<f64> {
    scalemix::study::COUNT_THRESHOLDS.to_vec()
}

fn scalings() -> Vec<f64> {
    scalemix::study::COND_SCALINGS.to_vec()
}

fn counts() -> Vec<usize> {
    scalemix::study::COND_COUNTS.to_vec()
}

fn percentiles() -> Vec<f64> {
    scalemix::study::COND_PERCENTILES.to_vec()
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            side: side(),
            n: realizations(),
            estimation_runs: estimation_runs(),
            sum_probs: sum_probs(),
            thresholds: thresholds(),
            scalings: scalings(),
            counts: counts(),
            percentiles: percentiles(),
        }
    }
}

/// A parsed config with its location and content hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Input(format!("{}: config is not UTF-8", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
    let hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, hash, dir })
}

pub fn missing(field: &str) -> CliError {
    CliError::Usage(format!("missing config field `{field}`"))
}

impl LoadedConfig {
    /// Paths in the config are relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn mixture(&self) -> Result<Option<GammaMixture>, CliError> {
        let m = self.config.mixture.as_ref().ok_or_else(|| missing("mixture.kind"))?;
        Ok(match m {
            MixtureConfig::Gaussian => None,
            MixtureConfig::Reference => Some(GammaMixture::reference().normalized()),
            MixtureConfig::Custom { weights, shapes, scales } => {
                Some(GammaMixture::new(weights.clone(), shapes.clone(), scales.clone())?)
            }
            MixtureConfig::File { path } => Some(scalemix::io::read_mixture(&self.resolve(path))?),
        })
    }

    pub fn estimation(&self, seed: u64) -> Result<(EstimationConfig, PathBuf), CliError> {
        let e = self.config.estimate.as_ref().ok_or_else(|| missing("estimate.data"))?;
        let d = OptimizerConfig::default();
        let cfg = EstimationConfig {
            k: e.k,
            s: e.s,
            optimizer: OptimizerConfig {
                restarts: e.restarts.unwrap_or(d.restarts),
                max_iters: e.max_iters.unwrap_or(d.max_iters),
                tol: e.tol.unwrap_or(d.tol),
            },
            cov_kind: e.cov_kind,
            seed,
        };
        cfg.validate()?;
        Ok((cfg, self.resolve(&e.data)))
    }
}
