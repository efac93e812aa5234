//! JSON envelopes and CSV tables.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::config::ExperimentConfig;
use crate::{CliError, VERSION};

/// Run facts that legitimately differ between re-runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub command: String,
    pub unix_time: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
}

impl Metadata {
    pub fn new(command: &str, started: Instant, threads: usize) -> Self {
        Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            elapsed_seconds: started.elapsed().as_secs_f64(),
            threads,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub metadata: Metadata,
    pub config: ExperimentConfig,
    pub result: T,
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn write_csv<R: Serialize>(dir: &Path, name: &str, rows: &[R]) -> Result<PathBuf, CliError> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(path)
}

/// One observation per row, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub omega: Option<u64>,
    pub eps: f64,
    pub quantity: String,
    pub value: f64,
    pub std_err: f64,
}

impl TidyRow {
    pub fn new(omega: Option<u64>, eps: f64, quantity: &str, value: f64, std_err: f64) -> Self {
        Self { omega, eps, quantity: quantity.to_string(), value, std_err }
    }
}
