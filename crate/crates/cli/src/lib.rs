//! Configuration, orchestration and result emission for the `roughmerton` binary.
//!
//! Every command writes a JSON envelope `{metadata, config, result}` to the output directory.
//! `config` is the fully resolved configuration and `result` the numbers; both are
//! byte-identical across re-runs with the same configuration, whatever the thread count.
//! Version, wall-clock time and thread count live in `metadata` only.

pub mod commands;
pub mod config;
pub mod output;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub use config::{ExperimentConfig, Scale};

pub const VERSION: &str = env!("ROUGHMERTON_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] roughmerton::Error),
    #[error("{0} of {1} table cells failed")]
    PartialFailure(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) | CliError::PartialFailure(..) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "roughmerton", version = VERSION, about = "Merton problem under a fast rough factor: coefficients, value tables and diagnostics")]
pub struct Cli {
    /// Configuration file (flat `key = value` or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Preset path count and time step, applied over the configuration file.
    #[arg(long, global = true, value_enum)]
    pub scale: Option<Scale>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invariant averages, D̄ and D̄'.
    Coefficients,
    /// V^ε and the utility losses of π⁰ and π̄⁰ per history and ε.
    Table2,
    /// Ergodic scaling report and the Monte Carlo D̄ cross-check.
    Diagnostics,
    /// Dump a path set in the binary layout.
    Paths {
        /// ε of the dump (default: first entry of `eps_grid`).
        #[arg(long)]
        eps: Option<f64>,
        /// History index.
        #[arg(long, default_value_t = 0)]
        omega: u64,
        /// Path count (default: `mc.n_paths`).
        #[arg(long)]
        n_paths: Option<usize>,
    },
    /// Direct log-wealth simulation of π⁰ and π̄⁰ against the change-of-measure estimators.
    Wealth,
}

/// Resolves defaults, the configuration file, the scale preset and flag overrides, in that order.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.scale {
        s.apply(&mut cfg);
    }
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(n) => n,
        None => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg, threads))
}
