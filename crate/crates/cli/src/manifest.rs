use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use combine_core::panel::{ACTUALS_FILE, FORECASTS_FILE};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::FileConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct SynthSettings {
    pub tickers: usize,
    pub quarters: usize,
    pub analysts: usize,
    pub missing_rate: f64,
    pub growth: f64,
}

#[derive(Debug, Serialize)]
pub struct FitTarget {
    pub ticker: String,
    pub fold: usize,
    pub estimator: String,
    pub lambda: Option<f64>,
    pub bins: Option<usize>,
}

/// Written next to every set of outputs. Feeding it back through `--config`
/// reproduces a backtest or fit.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<FileConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSettings>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Manifest {
    pub fn new(command: &str, started: f64, inputs: Vec<InputDigest>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: 0,
            jobs: None,
            config: None,
            fit: None,
            synth: None,
            inputs,
            outputs: Vec::new(),
            started_unix: started,
            finished_unix: started,
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix = now();
        let path = dir.join(MANIFEST_FILE);
        let mut out = crate::create(&path)?;
        let failed = |e: std::io::Error| CliError::Other(format!("cannot write {}: {e}", path.display()));
        serde_json::to_writer_pretty(&mut out, &self).map_err(|e| failed(e.into()))?;
        writeln!(out).and_then(|_| out.flush()).map_err(failed)
    }
}

/// SHA-256 of every file the panel loader will read at `path`.
pub fn input_digests(path: &Path) -> Result<Vec<InputDigest>, CliError> {
    let files = if path.is_dir() {
        [FORECASTS_FILE, ACTUALS_FILE]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|p| {
            let data = std::fs::read(&p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            let hash = Sha256::digest(&data);
            Ok(InputDigest {
                path: p.display().to_string(),
                bytes: data.len() as u64,
                sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            })
        })
        .collect()
}
