//! Flat TOML run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};

use dualres_core::KernelParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every key a config file may set. Keys irrelevant to the running
/// subcommand are ignored.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub fix_nu: Option<f64>,
    pub psi_le_nu: Option<bool>,
    pub nugget: Option<bool>,
    pub n0: Option<usize>,
    pub n1: Option<usize>,
    pub max_evals: Option<usize>,

    pub mode: Option<String>,
    pub high: Option<PathBuf>,
    pub std: Option<PathBuf>,
    pub high_mask: Option<PathBuf>,
    pub std_mask: Option<PathBuf>,
    pub theta: Option<PathBuf>,
    pub tau_sq: Option<f64>,
    pub psi: Option<f64>,
    pub nu: Option<f64>,
    pub estimate_from: Option<PathBuf>,
    pub radius: Option<f64>,
    pub chains: Option<usize>,
    pub iterations: Option<usize>,
    pub warmup: Option<usize>,
    pub thin: Option<usize>,
    pub leapfrog_steps: Option<usize>,
    pub allow_extend: Option<bool>,
    pub allow_clamp: Option<bool>,
    pub out_dir: Option<PathBuf>,

    pub fit_dir: Option<PathBuf>,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub t: Option<f64>,
    pub n_discoveries: Option<usize>,
    pub reading: Option<String>,

    pub kernel: Option<String>,
    pub snr_h: Option<f64>,
    pub ratio: Option<f64>,
    pub replicates: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Kernel parameter file written by `estimate-kernel` and read by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaFile {
    pub tau_sq: f64,
    pub psi: f64,
    pub nu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fwhm_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nugget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

impl ThetaFile {
    pub fn read(path: &Path) -> Result<KernelParams, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let t: ThetaFile =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid kernel file {}: {e}", path.display())))?;
        Ok(KernelParams::new(t.tau_sq, t.psi, t.nu)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot encode kernel: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// First defined value, else the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
