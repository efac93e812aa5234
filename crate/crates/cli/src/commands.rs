//! The subcommands. Each `*_result` function is pure (no files written) so tests can call it;
//! [`dispatch`] adds the envelope and writes the artifacts.

use roughmerton::asymptotics::{q_eps_approx, ExpansionCoefficients};
use roughmerton::diagnostics::{ergodic_report, ErgodicReport};
use roughmerton::fou::{build_convolution_weights, generate_history_indexed, FouPathSet};
use roughmerton::kernel::sigma_ou_sq;
use roughmerton::montecarlo::{
    estimate_all, paired_difference, simulate_wealth, EstimatorOptions, Strategy, ValueEstimate,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::output::{write_csv, write_json, Envelope, Metadata, TidyRow};
use crate::{CliError, Command};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsResult {
    pub model: String,
    pub hurst: f64,
    pub rate: f64,
    pub sigma_ou_sq: f64,
    pub coefficients: ExpansionCoefficients,
}

pub fn coefficients_result(cfg: &ExperimentConfig) -> Result<CoefficientsResult, CliError> {
    let p = cfg.kernel_params(1.0)?;
    let m = cfg.market_model()?;
    let c = ExpansionCoefficients::compute(m.as_ref(), &p, &cfg.preference()?, &cfg.quadrature_spec()?)?;
    Ok(CoefficientsResult {
        model: m.name().to_string(),
        hurst: p.hurst,
        rate: p.rate,
        sigma_ou_sq: sigma_ou_sq(&p),
        coefficients: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub value: f64,
    pub std_err: f64,
}

impl Difference {
    fn paired(a: &ValueEstimate, b: &ValueEstimate) -> Result<Self, CliError> {
        let (value, std_err) = paired_difference(a, b)?;
        Ok(Self { value, std_err })
    }
}

/// One (history, ε) cell of the value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Cell {
    pub omega: u64,
    pub history_id: String,
    pub eps: f64,
    pub v_eps: Option<ValueEstimate>,
    pub v_pi0: Option<ValueEstimate>,
    pub v_pibar0: Option<ValueEstimate>,
    /// `V^ε - V^{π⁰}` on shared paths.
    pub loss_pi0: Option<Difference>,
    /// `V^ε - V^{π̄⁰}` on shared paths.
    pub loss_pibar0: Option<Difference>,
    pub relative_loss_pi0: Option<f64>,
    pub relative_loss_pibar0: Option<f64>,
    /// First-order approximation `Q^ε(0, x0)`.
    pub q_eps_approx: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Result {
    pub coefficients: ExpansionCoefficients,
    pub cells: Vec<Table2Cell>,
    pub failures: usize,
}

/// Shape of the printed table: one row per history and ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub omega: u64,
    pub eps: f64,
    pub v_eps: f64,
    pub v_eps_se: f64,
    pub loss_pi0: f64,
    pub loss_pi0_se: f64,
    pub loss_pibar0: f64,
    pub loss_pibar0_se: f64,
    pub error: String,
}

fn table2_cell(
    cfg: &ExperimentConfig,
    set: &FouPathSet,
    omega: u64,
    coeffs: &ExpansionCoefficients,
    m: &dyn roughmerton::model::MarketModel,
) -> Result<Table2Cell, CliError> {
    let pref = cfg.preference()?;
    let opts = EstimatorOptions { control_variate: cfg.mc.control_variate };
    let t = estimate_all(set, m, coeffs, &pref, cfg.mc.x0, cfg.grid.horizon, opts)?;
    let l0 = Difference::paired(&t.v_eps, &t.v_pi0)?;
    let lb = Difference::paired(&t.v_eps, &t.v_pibar0)?;
    let q = q_eps_approx(0.0, cfg.mc.x0, set.params.eps, &pref, coeffs, cfg.grid.horizon)?;
    Ok(Table2Cell {
        omega,
        history_id: set.history_id(),
        eps: set.params.eps,
        relative_loss_pi0: Some(l0.value / t.v_eps.mean),
        relative_loss_pibar0: Some(lb.value / t.v_eps.mean),
        loss_pi0: Some(l0),
        loss_pibar0: Some(lb),
        q_eps_approx: Some(q),
        v_eps: Some(t.v_eps),
        v_pi0: Some(t.v_pi0),
        v_pibar0: Some(t.v_pibar0),
        error: None,
    })
}

/// Runs every (history, ε) cell with common random numbers; a failing cell is recorded and
/// the run continues.
pub fn table2_result(cfg: &ExperimentConfig) -> Result<Table2Result, CliError> {
    let g = cfg.grid_spec()?;
    let m = cfg.market_model()?;
    let coeffs = ExpansionCoefficients::compute(
        m.as_ref(),
        &cfg.kernel_params(1.0)?,
        &cfg.preference()?,
        &cfg.quadrature_spec()?,
    )?;
    let mut weights = Vec::with_capacity(cfg.eps_grid.len());
    for &eps in &cfg.eps_grid {
        weights.push(Arc::new(build_convolution_weights(&cfg.kernel_params(eps)?, &g)?));
    }
    let mut cells = Vec::new();
    let mut failures = 0;
    for omega in 0..cfg.mc.n_histories as u64 {
        let history = Arc::new(generate_history_indexed(&g, cfg.mc.seed, omega));
        for (w, &eps) in weights.iter().zip(&cfg.eps_grid) {
            let cell = FouPathSet::from_weights(
                w.clone(),
                &g,
                history.clone(),
                cfg.preference.rho,
                cfg.mc.n_paths,
                cfg.mc.seed,
            )
            .map_err(CliError::from)
            .and_then(|set| table2_cell(cfg, &set, omega, &coeffs, m.as_ref()));
            let cell = cell.unwrap_or_else(|e| {
                failures += 1;
                Table2Cell {
                    omega,
                    history_id: history.id(),
                    eps,
                    v_eps: None,
                    v_pi0: None,
                    v_pibar0: None,
                    loss_pi0: None,
                    loss_pibar0: None,
                    relative_loss_pi0: None,
                    relative_loss_pibar0: None,
                    q_eps_approx: None,
                    error: Some(e.to_string()),
                }
            });
            eprintln!(
                "table2: omega {omega} eps {eps}: {}",
                match (&cell.error, &cell.loss_pi0) {
                    (Some(e), _) => format!("failed ({e})"),
                    (None, Some(l)) => format!("loss(pi0) = {:.6} ± {:.6}", l.value, l.std_err),
                    _ => String::new(),
                }
            );
            cells.push(cell);
        }
    }
    Ok(Table2Result { coefficients: coeffs, cells, failures })
}

impl Table2Result {
    pub fn rows(&self) -> Vec<Table2Row> {
        let nan = f64::NAN;
        self.cells
            .iter()
            .map(|c| Table2Row {
                omega: c.omega,
                eps: c.eps,
                v_eps: c.v_eps.as_ref().map_or(nan, |v| v.mean),
                v_eps_se: c.v_eps.as_ref().map_or(nan, |v| v.std_err),
                loss_pi0: c.loss_pi0.map_or(nan, |d| d.value),
                loss_pi0_se: c.loss_pi0.map_or(nan, |d| d.std_err),
                loss_pibar0: c.loss_pibar0.map_or(nan, |d| d.value),
                loss_pibar0_se: c.loss_pibar0.map_or(nan, |d| d.std_err),
                error: c.error.clone().unwrap_or_default(),
            })
            .collect()
    }

    pub fn tidy(&self) -> Vec<TidyRow> {
        let mut out = Vec::new();
        for c in &self.cells {
            let o = Some(c.omega);
            for (name, v) in [("v_eps", &c.v_eps), ("v_pi0", &c.v_pi0), ("v_pibar0", &c.v_pibar0)] {
                if let Some(v) = v {
                    out.push(TidyRow::new(o, c.eps, name, v.mean, v.std_err));
                }
            }
            for (name, d) in [("loss_pi0", c.loss_pi0), ("loss_pibar0", c.loss_pibar0)] {
                if let Some(d) = d {
                    out.push(TidyRow::new(o, c.eps, name, d.value, d.std_err));
                }
            }
            if let Some(q) = c.q_eps_approx {
                out.push(TidyRow::new(o, c.eps, "q_eps_approx", q, 0.0));
            }
        }
        out
    }
}

pub fn diagnostics_result(cfg: &ExperimentConfig) -> Result<ErgodicReport, CliError> {
    let m = cfg.market_model()?;
    Ok(ergodic_report(&cfg.ergodic_config()?, m.as_ref(), &cfg.quadrature_spec()?)?)
}

fn diagnostics_tidy(r: &ErgodicReport) -> Vec<TidyRow> {
    let mut out = Vec::new();
    for (i, &eps) in r.eps_grid.iter().enumerate() {
        out.push(TidyRow::new(None, eps, "i_sq_mean", r.i_sq_mean[i].mean, r.i_sq_mean[i].std_err));
        out.push(TidyRow::new(None, eps, "phi_mean", r.phi_mean[i].mean, r.phi_mean[i].std_err));
        out.push(TidyRow::new(None, eps, "phi_l2", r.phi_l2[i].mean, r.phi_l2[i].std_err));
    }
    let d = &r.dbar_mc;
    out.push(TidyRow::new(None, d.eps, "dbar_mc", d.estimate.mean, d.estimate.std_err));
    out.push(TidyRow::new(None, d.eps, "dbar_quadrature", r.dbar_quadrature, 0.0));
    out.push(TidyRow::new(None, d.eps, "dbar_finite_horizon", r.dbar_finite_horizon, 0.0));
    for k in &r.kappa {
        out.push(TidyRow::new(None, k.eps, "kappa_sup_l2", k.sup_l2, 0.0));
        out.push(TidyRow::new(None, k.eps, "kappa_ratio", k.ratio, 0.0));
    }
    out
}

fn print_scaling_table(r: &ErgodicReport) {
    println!("{:>8}  {:>14}  {:>12}  {:>14}  {:>12}", "eps", "E[I_T^2]", "se", "|phi_t|_2", "se");
    for (i, eps) in r.eps_grid.iter().enumerate() {
        println!(
            "{:>8}  {:>14.6e}  {:>12.3e}  {:>14.6e}  {:>12.3e}",
            eps, r.i_sq_mean[i].mean, r.i_sq_mean[i].std_err, r.phi_l2[i].mean, r.phi_l2[i].std_err
        );
    }
    println!("slope E[I_T^2]: {:.4} ± {:.4} (1-H = {:.2})", r.slope_i, r.slope_i_se, r.expected_slope);
    println!("slope |phi_t|_2: {:.4} ± {:.4}", r.slope_phi, r.slope_phi_se);
    println!(
        "dbar: quadrature {:.6e}, finite horizon {:.6e}, Monte Carlo {:.6e} ± {:.2e} (eps = {})",
        r.dbar_quadrature, r.dbar_finite_horizon, r.dbar_mc.estimate.mean, r.dbar_mc.estimate.std_err, r.dbar_mc.eps
    );
    for k in &r.kappa {
        println!("kappa eps {}: sup |kappa_t|_2 = {:.4e}, ratio to sqrt(eps) = {:.4e}", k.eps, k.sup_l2, k.ratio);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsResult {
    pub file: String,
    pub eps: f64,
    pub omega: u64,
    pub history_id: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_history: usize,
    pub dt: f64,
    pub seed: u64,
}

pub fn paths_result(
    cfg: &ExperimentConfig,
    eps: Option<f64>,
    omega: u64,
    n_paths: Option<usize>,
) -> Result<(PathsResult, FouPathSet), CliError> {
    let eps = eps.unwrap_or(cfg.eps_grid[0]);
    let p = cfg.kernel_params(eps)?;
    let g = cfg.grid_spec()?;
    let n = n_paths.unwrap_or(cfg.mc.n_paths);
    if n == 0 {
        return Err(CliError::Config("--n-paths must be positive".into()));
    }
    let history = Arc::new(generate_history_indexed(&g, cfg.mc.seed, omega));
    let set = roughmerton::fou::simulate_paths(&p, &g, history, cfg.preference.rho, n, cfg.mc.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let r = PathsResult {
        file: "paths.bin".into(),
        eps,
        omega,
        history_id: set.history_id(),
        n_paths: n,
        n_steps: g.n_steps,
        n_history: g.n_history,
        dt: g.dt,
        seed: cfg.mc.seed,
    };
    Ok((r, set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthCell {
    pub eps: f64,
    pub wealth_pi0: ValueEstimate,
    pub v_pi0: ValueEstimate,
    /// `wealth_pi0 - v_pi0` on shared paths.
    pub diff_pi0: Difference,
    pub wealth_pibar0: ValueEstimate,
    pub v_pibar0: ValueEstimate,
    pub diff_pibar0: Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthRow {
    pub eps: f64,
    pub strategy: String,
    pub wealth: f64,
    pub wealth_se: f64,
    pub estimator: f64,
    pub estimator_se: f64,
    pub diff: f64,
    pub diff_se: f64,
}

/// History 0 of the seed, every ε of the grid.
pub fn wealth_result(cfg: &ExperimentConfig) -> Result<Vec<WealthCell>, CliError> {
    let g = cfg.grid_spec()?;
    let m = cfg.market_model()?;
    let pref = cfg.preference()?;
    let coeffs = ExpansionCoefficients::compute(m.as_ref(), &cfg.kernel_params(1.0)?, &pref, &cfg.quadrature_spec()?)?;
    let history = Arc::new(generate_history_indexed(&g, cfg.mc.seed, 0));
    let opts = EstimatorOptions { control_variate: cfg.mc.control_variate };
    let (x0, horizon) = (cfg.mc.x0, cfg.grid.horizon);
    let mut out = Vec::new();
    for &eps in &cfg.eps_grid {
        let set = roughmerton::fou::simulate_paths(
            &cfg.kernel_params(eps)?,
            &g,
            history.clone(),
            pref.rho,
            cfg.mc.n_paths,
            cfg.mc.seed,
        )?;
        let t = estimate_all(&set, m.as_ref(), &coeffs, &pref, x0, horizon, opts)?;
        let w0 = simulate_wealth(&Strategy::Pi0, &set, m.as_ref(), &pref, x0, horizon)?;
        let wb = simulate_wealth(&Strategy::pibar0(&coeffs), &set, m.as_ref(), &pref, x0, horizon)?;
        eprintln!("wealth: eps {eps}: pi0 {:.6} vs {:.6}", w0.mean, t.v_pi0.mean);
        out.push(WealthCell {
            eps,
            diff_pi0: Difference::paired(&w0, &t.v_pi0)?,
            diff_pibar0: Difference::paired(&wb, &t.v_pibar0)?,
            wealth_pi0: w0,
            v_pi0: t.v_pi0,
            wealth_pibar0: wb,
            v_pibar0: t.v_pibar0,
        });
    }
    Ok(out)
}

fn wealth_rows(cells: &[WealthCell]) -> Vec<WealthRow> {
    let mut rows = Vec::new();
    for c in cells {
        for (name, w, v, d) in
            [("pi0", &c.wealth_pi0, &c.v_pi0, c.diff_pi0), ("pibar0", &c.wealth_pibar0, &c.v_pibar0, c.diff_pibar0)]
        {
            rows.push(WealthRow {
                eps: c.eps,
                strategy: name.into(),
                wealth: w.mean,
                wealth_se: w.std_err,
                estimator: v.mean,
                estimator_se: v.std_err,
                diff: d.value,
                diff_se: d.std_err,
            });
        }
    }
    rows
}

fn envelope<T>(name: &str, started: Instant, threads: usize, cfg: &ExperimentConfig, result: T) -> Envelope<T> {
    Envelope { metadata: Metadata::new(name, started, threads), config: cfg.clone(), result }
}

pub fn dispatch(cmd: &Command, cfg: &ExperimentConfig, threads: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = cfg.output.dir.as_path();
    match cmd {
        Command::Coefficients => {
            let r = coefficients_result(cfg)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
            write_json(dir, "coefficients.json", &envelope("coefficients", started, threads, cfg, r))?;
        }
        Command::Table2 => {
            let r = table2_result(cfg)?;
            write_csv(dir, "table2.csv", &r.rows())?;
            write_csv(dir, "table2_tidy.csv", &r.tidy())?;
            let (failures, total) = (r.failures, r.cells.len());
            write_json(dir, "table2.json", &envelope("table2", started, threads, cfg, r))?;
            if failures > 0 {
                return Err(CliError::PartialFailure(failures, total));
            }
        }
        Command::Diagnostics => {
            let r = diagnostics_result(cfg)?;
            print_scaling_table(&r);
            write_csv(dir, "diagnostics_tidy.csv", &diagnostics_tidy(&r))?;
            write_json(dir, "diagnostics.json", &envelope("diagnostics", started, threads, cfg, r))?;
        }
        Command::Paths { eps, omega, n_paths } => {
            let (r, set) = paths_result(cfg, *eps, *omega, *n_paths)?;
            std::fs::create_dir_all(dir)?;
            let file = std::io::BufWriter::new(std::fs::File::create(dir.join(&r.file))?);
            set.write_dump(file)?;
            write_json(dir, "paths.json", &envelope("paths", started, threads, cfg, r))?;
        }
        Command::Wealth => {
            let r = wealth_result(cfg)?;
            write_csv(dir, "wealth.csv", &wealth_rows(&r))?;
            write_json(dir, "wealth.json", &envelope("wealth", started, threads, cfg, r))?;
        }
    }
    Ok(())
}
