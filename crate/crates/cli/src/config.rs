//! Experiment configuration.
//!
//! Two formats are accepted. A JSON document mirroring [`ExperimentConfig`], or flat text with
//! one `dotted.key = value` per line:
//!
//! ```text
//! # paper parameters
//! kernel.hurst = 0.1
//! kernel.rate = 1
//! eps_grid = [1, 0.5, 0.1, 0.05, 0.01]
//! grid.dt = 1e-3
//! grid.history = sqrt
//! preference.gamma = 0.4
//! preference.rho = -0.5
//! model = paper
//! mc.n_paths = 50000
//! mc.seed = 1
//! ```
//!
//! Values are read as JSON when they parse as JSON and as bare strings otherwise. Unset keys
//! take the defaults below; unknown keys are rejected.

use roughmerton::diagnostics::ErgodicConfig;
use roughmerton::fou::{GridSpec, HistoryRule};
use roughmerton::kernel::KernelParams;
use roughmerton::model::{model_by_name, MarketModel, RiskPreference};
use roughmerton::quadrature::QuadratureSpec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub hurst: f64,
    pub rate: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { hurst: 0.1, rate: 1.0 }
    }
}

/// `"sqrt"` for `M = (T/dt)^{1/2}`, or an explicit history length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistorySetting {
    Length(f64),
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub dt: f64,
    pub history: HistorySetting,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, dt: 1e-3, history: HistorySetting::Rule("sqrt".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub gamma: f64,
    pub rho: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self { gamma: 0.4, rho: -0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Number of conditioning histories ("omega" in the value table).
    pub n_histories: usize,
    pub x0: f64,
    pub control_variate: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 50_000, seed: 1, n_histories: 3, x0: 1.0, control_variate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        let q = QuadratureSpec::default();
        Self { abs_tol: q.abs_tol, rel_tol: q.rel_tol, max_subdivisions: q.max_subdivisions }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub eps_grid: Vec<f64>,
    pub n_samples: usize,
    pub dbar_eps: f64,
    pub dbar_samples: usize,
    pub reference_t: Option<f64>,
    pub kappa_eps: Vec<f64>,
    pub kappa_stride: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            eps_grid: vec![0.2, 0.1, 0.05, 0.02],
            n_samples: 2_000,
            dbar_eps: 0.01,
            dbar_samples: 10_000,
            reference_t: None,
            kappa_eps: vec![0.2, 0.05, 0.01],
            kappa_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kernel: KernelConfig,
    pub eps_grid: Vec<f64>,
    pub grid: GridConfig,
    pub preference: PreferenceConfig,
    /// `paper`, `constant` or `constant:<mu>:<sigma>`.
    pub model: String,
    pub mc: McConfig,
    pub quadrature: QuadratureConfig,
    pub diagnostics: DiagnosticsConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            eps_grid: vec![1.0, 0.5, 0.1, 0.05, 0.01],
            grid: GridConfig::default(),
            preference: PreferenceConfig::default(),
            model: "paper".into(),
            mc: McConfig::default(),
            quadrature: QuadratureConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    /// 50,000 paths, dt = 1e-3.
    Desk,
    /// 500,000 paths, dt = 1e-4.
    Paper,
}

impl Scale {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (n, dt) = match self {
            Scale::Desk => (50_000, 1e-3),
            Scale::Paper => (500_000, 1e-4),
        };
        cfg.mc.n_paths = n;
        cfg.grid.dt = dt;
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses the flat `dotted.key = value` format into a JSON tree.
pub fn parse_flat(text: &str) -> Result<Value, CliError> {
    let mut root = Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| config_error(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
            return Err(config_error(format!("line {}: malformed key `{key}`", lineno + 1)));
        }
        let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| config_error(format!("line {}: `{part}` is both a value and a section", lineno + 1)))?;
        }
        let last = parts[parts.len() - 1].to_string();
        if node.insert(last, parsed).is_some() {
            return Err(config_error(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(Value::Object(root))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let tree = if text.trim_start().starts_with('{') {
            serde_json::from_str::<Value>(text).map_err(|e| config_error(format!("invalid JSON: {e}")))?
        } else {
            parse_flat(text)?
        };
        serde_json::from_value(tree).map_err(|e| config_error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn kernel_params(&self, eps: f64) -> Result<KernelParams, CliError> {
        KernelParams::new(self.kernel.hurst, self.kernel.rate, eps).map_err(|e| config_error(e.to_string()))
    }

    pub fn grid_spec(&self) -> Result<GridSpec, CliError> {
        let rule = match &self.grid.history {
            HistorySetting::Length(m) => HistoryRule::Explicit(*m),
            HistorySetting::Rule(s) if s == "sqrt" => HistoryRule::Sqrt,
            HistorySetting::Rule(s) => {
                return Err(config_error(format!("grid.history must be a length or \"sqrt\", got \"{s}\"")))
            }
        };
        GridSpec::new(self.grid.horizon, self.grid.dt, rule).map_err(|e| config_error(e.to_string()))
    }

    pub fn preference(&self) -> Result<RiskPreference, CliError> {
        RiskPreference::new(self.preference.gamma, self.preference.rho).map_err(|e| config_error(e.to_string()))
    }

    pub fn quadrature_spec(&self) -> Result<QuadratureSpec, CliError> {
        let q = &self.quadrature;
        QuadratureSpec::new(q.abs_tol, q.rel_tol, q.max_subdivisions).map_err(|e| config_error(e.to_string()))
    }

    pub fn market_model(&self) -> Result<Arc<dyn MarketModel>, CliError> {
        let p = self.kernel_params(1.0)?;
        model_by_name(&self.model, &p).map_err(|e| config_error(e.to_string()))
    }

    pub fn ergodic_config(&self) -> Result<ErgodicConfig, CliError> {
        let d = &self.diagnostics;
        Ok(ErgodicConfig {
            hurst: self.kernel.hurst,
            rate: self.kernel.rate,
            eps_grid: d.eps_grid.clone(),
            grid: self.grid_spec()?,
            n_samples: d.n_samples,
            seed: self.mc.seed,
            dbar_eps: d.dbar_eps,
            dbar_samples: d.dbar_samples,
            reference_t: d.reference_t,
            kappa_eps: d.kappa_eps.clone(),
            kappa_stride: d.kappa_stride,
        })
    }

    /// Checks every referenced parameter set without running anything.
    pub fn validate(&self) -> Result<(), CliError> {
        let check_eps = |name: &str, grid: &[f64]| -> Result<(), CliError> {
            if grid.is_empty() {
                return Err(config_error(format!("{name} must not be empty")));
            }
            for &e in grid {
                if !(e > 0.0 && e <= 1.0) {
                    return Err(config_error(format!("{name} entry {e} not in (0, 1]")));
                }
            }
            Ok(())
        };
        check_eps("eps_grid", &self.eps_grid)?;
        check_eps("diagnostics.eps_grid", &self.diagnostics.eps_grid)?;
        check_eps("diagnostics.dbar_eps", &[self.diagnostics.dbar_eps])?;
        if !self.diagnostics.kappa_eps.is_empty() {
            check_eps("diagnostics.kappa_eps", &self.diagnostics.kappa_eps)?;
        }
        for &e in &self.eps_grid {
            self.kernel_params(e)?;
        }
        let g = self.grid_spec()?;
        self.preference()?;
        self.quadrature_spec()?;
        self.market_model()?;
        if self.mc.n_paths < 2 {
            return Err(config_error("mc.n_paths must be at least 2"));
        }
        if self.mc.n_histories == 0 {
            return Err(config_error("mc.n_histories must be positive"));
        }
        if self.mc.x0 <= 0.0 || !self.mc.x0.is_finite() {
            return Err(config_error("mc.x0 must be positive"));
        }
        let d = &self.diagnostics;
        if d.n_samples < 2 || d.dbar_samples < 2 || d.kappa_stride == 0 {
            return Err(config_error("diagnostics sample counts must be at least 2 and kappa_stride positive"));
        }
        if let Some(t) = d.reference_t {
            if !(0.0..=g.horizon).contains(&t) {
                return Err(config_error(format!("diagnostics.reference_t {t} outside [0, T]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_json_agree() {
        let flat = "# comment\nkernel.hurst = 0.25\neps_grid = [1, 0.1]\ngrid.history = sqrt\nmodel = constant:0.1:0.2\nmc.n_paths = 100\n";
        let json = r#"{"kernel": {"hurst": 0.25}, "eps_grid": [1, 0.1], "grid": {"history": "sqrt"},
                       "model": "constant:0.1:0.2", "mc": {"n_paths": 100}}"#;
        let a = ExperimentConfig::from_text(flat).unwrap();
        let b = ExperimentConfig::from_text(json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kernel.rate, 1.0);
        a.validate().unwrap();
    }

    #[test]
    fn explicit_history_length() {
        let c = ExperimentConfig::from_text("grid.history = 2.5").unwrap();
        assert_eq!(c.grid.history, HistorySetting::Length(2.5));
        assert_eq!(c.grid_spec().unwrap().history_length, 2.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_text("kernel.nope = 1").is_err());
        assert!(ExperimentConfig::from_text("kernel.hurst 1").is_err());
        assert!(ExperimentConfig::from_text("mc.seed = 1\nmc.seed = 2").is_err());
        let c = ExperimentConfig::from_text("eps_grid = [0.5, 2]").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let c = ExperimentConfig::from_text("kernel.hurst = 0.7").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_text("grid.history = cube").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_text(&s).unwrap(), c);
    }

    #[test]
    fn scale_presets() {
        let mut c = ExperimentConfig::default();
        Scale::Paper.apply(&mut c);
        assert_eq!((c.mc.n_paths, c.grid.dt), (500_000, 1e-4));
        Scale::Desk.apply(&mut c);
        assert_eq!((c.mc.n_paths, c.grid.dt), (50_000, 1e-3));
    }
}
