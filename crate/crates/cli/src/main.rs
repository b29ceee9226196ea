mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Gaussian scale-mixture random fields: simulation, estimation,
/// saddlepoint interpolation, conditional simulation and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "scalemix", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Largest number of grid sites accepted.
    #[arg(long, global = true, value_name = "N", default_value_t = commands::DEFAULT_CAP)]
    pub grid_cap: usize,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Unconditional realizations at the configured sites.
    Simulate,
    /// Covariance and scaling-mixture estimation from a sample matrix.
    Estimate,
    /// Saddlepoint conditional CDF at a target site.
    Interpolate,
    /// Conditional simulation at target sites.
    Condsim,
    /// Desk-scale synthetic study bundle.
    ReproduceSynthetic,
    /// Threshold counts, exceedance sums or congregation entropy.
    Diagnose,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<scalemix::Error> for CliError {
    fn from(e: scalemix::Error) -> Self {
        use scalemix::Error as E;
        match e {
            E::Size(m) => CliError::Usage(format!("{m}; raise --grid-cap to allow it")),
            E::Domain(_) | E::Input(_) | E::Io(_) | E::Csv(_) => CliError::Input(e.to_string()),
            E::NotPositiveDefinite { .. } | E::OutsideStrip { .. } | E::Solver { .. } | E::Optimization(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", CliError::Usage("--threads must be at least 1".into()));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::Usage(e.to_string()));
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
