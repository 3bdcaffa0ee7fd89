//! `dualres`: kernel estimation, model fitting, thresholding and simulation
//! sweeps from the command line.
//!
//! Exit codes: 0 success, 1 model or numerical failure, 2 usage or I/O error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Model(dualres_core::Error),
}

impl From<dualres_core::Error> for CliError {
    fn from(e: dualres_core::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Model(e)
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dualres", version, about = "Bayesian dual-resolution Gaussian-process mapping")]
pub struct Cli {
    /// Flat TOML file of defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DUALRES_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a covariance kernel to an image by minimum contrast.
    EstimateKernel(EstimateArgs),
    /// Sample the posterior of one fitting mode.
    Fit(FitArgs),
    /// Turn posterior draws into activation decisions.
    Threshold(ThresholdArgs),
    /// Run the two-dimensional simulation sweep.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input NIfTI volume.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Explicit mask volume (non-zero = in analysis).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Hold the exponent nu at this value.
    #[arg(long)]
    pub fix_nu: Option<f64>,
    /// `name=on|off`; currently only `psi-le-nu`.
    #[arg(long = "constraint")]
    pub constraints: Vec<String>,
    /// Also fit a nugget to the zero-distance entry.
    #[arg(long)]
    pub nugget: bool,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub max_evals: Option<usize>,
    /// Kernel parameter file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Covariogram CSV (`distance_mm,cov,weight,pairs`).
    #[arg(long)]
    pub covariogram: Option<PathBuf>,
    /// Fitted-curve CSV (`distance_mm,k_fit`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// dual, high, std or naive.
    #[arg(long)]
    pub mode: Option<String>,
    /// High-resolution image; its grid and mask define the output voxels.
    #[arg(long)]
    pub high: Option<PathBuf>,
    /// Standard-resolution image.
    #[arg(long)]
    pub std: Option<PathBuf>,
    #[arg(long)]
    pub high_mask: Option<PathBuf>,
    #[arg(long)]
    pub std_mask: Option<PathBuf>,
    /// Kernel parameter file.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[arg(long)]
    pub tau_sq: Option<f64>,
    #[arg(long)]
    pub psi: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    /// Estimate the kernel from this volume instead of supplying it.
    #[arg(long)]
    pub estimate_from: Option<PathBuf>,
    /// Kriging radius in mm (defaults to the kernel FWHM).
    #[arg(long = "r")]
    pub radius: Option<f64>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Total iterations per chain, warmup included.
    #[arg(long = "iters")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Leapfrog steps per iteration.
    #[arg(long = "L")]
    pub leapfrog_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retry indefinite embeddings on a doubled grid.
    #[arg(long)]
    pub allow_extend: bool,
    /// Clamp tiny negative embedding eigenvalues.
    #[arg(long)]
    pub allow_clamp: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    pub fit_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "n_discoveries")]
    pub k1: Option<f64>,
    #[arg(long, conflicts_with = "n_discoveries")]
    pub k2: Option<f64>,
    #[arg(long, conflicts_with = "n_discoveries")]
    pub t: Option<f64>,
    /// Report exactly this many voxels instead of using the loss.
    #[arg(long)]
    pub n_discoveries: Option<usize>,
    /// mc (average over draws) or plugin (posterior-mean magnitudes).
    #[arg(long)]
    pub reading: Option<String>,
    /// Defaults to the fit directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// exponential or gaussian; comma-separated for several.
    #[arg(long)]
    pub kernel: Option<String>,
    /// High-resolution SNR; comma-separated for several.
    #[arg(long)]
    pub snr_h: Option<String>,
    /// Standard-to-high SNR ratio; comma-separated for several.
    #[arg(long)]
    pub ratio: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Total iterations per chain, warmup included.
    #[arg(long = "iters")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long = "L")]
    pub leapfrog_steps: Option<usize>,
    #[arg(long)]
    pub n_discoveries: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Model(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
