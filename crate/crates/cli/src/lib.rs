//! Library side of the `svib` command: config loading, run directories
//! and plot data. The binary in `main.rs` is argument parsing on top.

pub mod config;
pub mod plot;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use svib_core::RunConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("bad override: {0}")]
    Override(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("field `{field}` not found in {run}; available fields: {available}")]
    MissingField {
        field: String,
        run: String,
        available: String,
    },
    #[error("{0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] svib_core::Error),
}

pub const RUNS_DIR_ENV: &str = "SVIB_RUNS_DIR";

/// `--runs-dir`, then `$SVIB_RUNS_DIR`, then `./runs`.
pub fn runs_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config-hash>/<seed>`.
pub fn run_dir(root: &Path, config: &RunConfig) -> PathBuf {
    root.join(config::config_hash(config)).join(config.seed.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch when the run started; the only field
    /// that differs between repeated identical runs.
    pub started_unix: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Manifest {
            config_hash: config::config_hash(config),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::Io(path.display().to_string(), e))
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Plot(format!("{}: {e}", path.display())))
    }
}

/// Empties the pieces of `dir` a run writes, so a rerun leaves no stale
/// checkpoints behind.
pub fn prepare_run_dir(dir: &Path) -> Result<(), CliError> {
    let io = |p: &Path, e| CliError::Io(p.display().to_string(), e);
    let ck = dir.join("checkpoints");
    if ck.exists() {
        std::fs::remove_dir_all(&ck).map_err(|e| io(&ck, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}
