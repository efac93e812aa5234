//! Monte Carlo estimators of the value at `t = 0` given the history, for the optimal investor
//! (`V^ε`, via the martingale distortion representation), the leading-order strategy `π⁰`, and
//! the factor-blind strategy `π̄⁰`, plus a direct log-wealth simulation.
//!
//! Every estimator reduces a path to six left-point (Itô) sums
//!
//! ```text
//! ∫λ² dt, ∫λ dW^Y, ∫λ dW, ∫μ dt, ∫σ² dt, ∫σ dW
//! ```
//!
//! so all three values can be computed from one pass over a path set with common random
//! numbers. Each exponential functional `F = exp(a ∫f² dt + c ∫f dB)` is paired with the control
//! `Z = exp(c ∫f dB - c²/2 ∫f² dt)`, whose mean is exactly one on the grid because `f` at step
//! `k` only depends on noise before step `k`; the control-variate estimate is
//! `mean(F - β(Z - 1))` with `β` the sample regression coefficient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::asymptotics::{q_exponent, utility, ExpansionCoefficients};
use crate::diagnostics::StationarySampler;
use crate::error::{invalid, Error, Result};
use crate::fou::{FouPath, FouPathSet};
use crate::model::{MarketModel, RiskPreference};
use crate::stats::{self, CompensatedSum};

/// Fractions of wealth above this magnitude are rejected as inadmissible.
pub const MAX_FRACTION: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub estimator_name: String,
    pub eps: f64,
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub history_id: String,
    /// Leading `O(1/n)` bias from applying a nonlinear map after averaging.
    pub jensen_bias: f64,
    /// Per-path centred contributions to `mean`; used for paired differences.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

impl ValueEstimate {
    /// Difference `self - other` on shared paths, with its standard error.
    pub fn paired_difference(&self, other: &ValueEstimate) -> Result<(f64, f64)> {
        paired_difference(self, other)
    }
}

pub fn paired_difference(a: &ValueEstimate, b: &ValueEstimate) -> Result<(f64, f64)> {
    if a.influence.len() != b.influence.len() || a.influence.is_empty() {
        return Err(invalid("paired_difference", "estimates were not computed on the same paths"));
    }
    let d: Vec<f64> = a.influence.iter().zip(&b.influence).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mut ss = CompensatedSum::new();
    for v in &d {
        ss.add(v * v);
    }
    let se = (ss.value() / (n - 1.0) / n).sqrt();
    Ok((a.mean - b.mean, se))
}

/// Left-point sums along one path.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PathFunctionals {
    pub lambda_sq_dt: f64,
    pub lambda_dwy: f64,
    pub lambda_dw: f64,
    pub mu_dt: f64,
    pub sigma_sq_dt: f64,
    pub sigma_dw: f64,
}

pub fn path_functionals(path: &FouPath, m: &dyn MarketModel, dt: f64) -> PathFunctionals {
    let mut f = PathFunctionals::default();
    for k in 0..path.dwy.len() {
        let y = path.y[k];
        let l = m.lambda(y);
        let s = m.sigma(y);
        f.lambda_sq_dt += l * l * dt;
        f.lambda_dwy += l * path.dwy[k];
        f.lambda_dw += l * path.dw[k];
        f.mu_dt += m.mu(y) * dt;
        f.sigma_sq_dt += s * s * dt;
        f.sigma_dw += s * path.dw[k];
    }
    f
}

/// Functionals of every path of the set, in path order.
pub fn all_path_functionals(set: &FouPathSet, m: &dyn MarketModel) -> Result<Vec<PathFunctionals>> {
    let dt = set.grid.dt;
    let out: Vec<std::result::Result<PathFunctionals, usize>> = (0..set.n_paths)
        .into_par_iter()
        .map_init(FouPath::default, |buf, i| {
            set.path_into(i, buf);
            if buf.y.iter().any(|v| !v.is_finite()) {
                return Err(i);
            }
            Ok(path_functionals(buf, m, dt))
        })
        .collect();
    out.into_iter()
        .map(|r| {
            r.map_err(|path| Error::Estimator {
                estimator: "path_functionals",
                path,
                reason: "non-finite factor value".into(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub control_variate: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { control_variate: true }
    }
}

/// Mean of `f` with optional control `z` (known mean one); returns mean, SE, centred residuals.
fn controlled_mean(f: &[f64], z: &[f64], use_cv: bool) -> (f64, f64, Vec<f64>) {
    let n = f.len();
    let beta = if use_cv {
        let vz = stats::variance(z);
        if vz > 0.0 {
            stats::covariance(f, z) / vz
        } else {
            0.0
        }
    } else {
        0.0
    };
    let r: Vec<f64> = f.iter().zip(z).map(|(fi, zi)| fi - beta * (zi - 1.0)).collect();
    let (mean, se) = stats::mean_se(&r);
    let infl = r.iter().map(|v| v - mean).collect();
    debug_assert_eq!(n, r.len());
    (mean, se, infl)
}

fn exponentials(
    name: &'static str,
    funcs: &[PathFunctionals],
    exponent: impl Fn(&PathFunctionals) -> (f64, f64),
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut f = Vec::with_capacity(funcs.len());
    let mut z = Vec::with_capacity(funcs.len());
    for (i, p) in funcs.iter().enumerate() {
        let (ef, ez) = exponent(p);
        let (vf, vz) = (ef.exp(), ez.exp());
        if !vf.is_finite() || !vz.is_finite() {
            return Err(Error::Estimator { estimator: name, path: i, reason: format!("exponent {ef} overflows") });
        }
        f.push(vf);
        z.push(vz);
    }
    Ok((f, z))
}

fn check_inputs(set: &FouPathSet, pref: &RiskPreference, x0: f64, horizon: f64) -> Result<()> {
    pref.validate()?;
    if !(x0 > 0.0) {
        return Err(Error::Domain(format!("initial wealth {x0} must be positive")));
    }
    if (horizon - set.grid.horizon).abs() > 1e-12 * horizon {
        return Err(invalid("horizon", format!("{horizon} differs from the grid horizon {}", set.grid.horizon)));
    }
    if set.n_paths < 2 {
        return Err(invalid("n_paths", "at least two paths are needed"));
    }
    if (pref.rho - set.rho).abs() > 0.0 {
        return Err(invalid("rho", format!("preference rho {} differs from path rho {}", pref.rho, set.rho)));
    }
    Ok(())
}

fn finish(
    name: &str,
    set: &FouPathSet,
    mean: f64,
    std_err: f64,
    jensen_bias: f64,
    influence: Vec<f64>,
) -> ValueEstimate {
    ValueEstimate {
        estimator_name: name.to_string(),
        eps: set.params.eps,
        mean,
        std_err,
        n_paths: set.n_paths,
        seed: set.seed,
        history_id: set.history_id(),
        jensen_bias,
        influence,
    }
}

fn v_eps_from(
    set: &FouPathSet,
    funcs: &[PathFunctionals],
    pref: &RiskPreference,
    x0: f64,
    opts: EstimatorOptions,
) -> Result<ValueEstimate> {
    let g = pref.gamma;
    let a = (1.0 - g) / (2.0 * g);
    let c = pref.rho * (1.0 - g) / g;
    let (f, z) = exponentials("v_eps", funcs, |p| {
        (a * p.lambda_sq_dt + c * p.lambda_dwy, c * p.lambda_dwy - 0.5 * c * c * p.lambda_sq_dt)
    })?;
    let (m, se, infl) = controlled_mean(&f, &z, opts.control_variate);
    let q = q_exponent(pref);
    let pre = utility(x0, g);
    let d1 = pre * q * m.powf(q - 1.0);
    let bias = pre * 0.5 * q * (q - 1.0) * m.powf(q - 2.0) * se * se;
    Ok(finish("v_eps", set, pre * m.powf(q), d1.abs() * se, bias, infl.into_iter().map(|v| d1 * v).collect()))
}

fn pi0_mean(
    funcs: &[PathFunctionals],
    pref: &RiskPreference,
    x0: f64,
    opts: EstimatorOptions,
) -> Result<(f64, f64, Vec<f64>)> {
    let g = pref.gamma;
    let a = (-2.0 * g * g + 3.0 * g - 1.0) / (2.0 * g * g);
    let c = (1.0 - g) / g;
    let (f, z) = exponentials("v_pi0", funcs, |p| {
        (a * p.lambda_sq_dt + c * p.lambda_dw, c * p.lambda_dw - 0.5 * c * c * p.lambda_sq_dt)
    })?;
    let (m, se, infl) = controlled_mean(&f, &z, opts.control_variate);
    let pre = utility(x0, g);
    Ok((pre * m, pre.abs() * se, infl.into_iter().map(|v| pre * v).collect()))
}

fn v_pi0_from(
    set: &FouPathSet,
    funcs: &[PathFunctionals],
    pref: &RiskPreference,
    x0: f64,
    opts: EstimatorOptions,
) -> Result<ValueEstimate> {
    let (mean, se, infl) = pi0_mean(funcs, pref, x0, opts)?;
    Ok(finish("v_pi0", set, mean, se, 0.0, infl))
}

/// `V^{π⁰,ε}_0` averaged over the stationary law of the past as well: path `i` runs on its
/// own history, so history-to-history variation is part of the standard error.
pub fn estimate_v_pi0_stationary(
    sampler: &StationarySampler,
    m: &dyn MarketModel,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
    n_paths: usize,
) -> Result<ValueEstimate> {
    pref.validate()?;
    if !(x0 > 0.0) {
        return Err(Error::Domain(format!("initial wealth {x0} must be positive")));
    }
    if (horizon - sampler.grid.horizon).abs() > 1e-12 * horizon {
        return Err(invalid("horizon", format!("{horizon} differs from the grid horizon {}", sampler.grid.horizon)));
    }
    if n_paths < 2 {
        return Err(invalid("n_paths", "at least two paths are needed"));
    }
    let dt = sampler.grid.dt;
    let funcs: Vec<std::result::Result<PathFunctionals, usize>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let path = sampler.path(i, pref.rho);
            if path.y.iter().any(|v| !v.is_finite()) {
                return Err(i);
            }
            Ok(path_functionals(&path, m, dt))
        })
        .collect();
    let funcs = funcs
        .into_iter()
        .map(|r| {
            r.map_err(|path| Error::Estimator {
                estimator: "path_functionals",
                path,
                reason: "non-finite factor value".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std_err, influence) = pi0_mean(&funcs, pref, x0, EstimatorOptions::default())?;
    Ok(ValueEstimate {
        estimator_name: "v_pi0_stationary".into(),
        eps: sampler.weights.params.eps,
        mean,
        std_err,
        n_paths,
        seed: sampler.seed,
        history_id: "stationary".into(),
        jensen_bias: 0.0,
        influence,
    })
}

fn v_pibar0_from(
    set: &FouPathSet,
    funcs: &[PathFunctionals],
    coeffs: &ExpansionCoefficients,
    pref: &RiskPreference,
    x0: f64,
    opts: EstimatorOptions,
) -> Result<ValueEstimate> {
    let g = pref.gamma;
    let ratio = coeffs.mu_bar / coeffs.sigma_bar_sq;
    let c = (1.0 - g) / g * ratio;
    let b = (1.0 - g) / (2.0 * g * g) * ratio * ratio;
    let (f, z) = exponentials("v_pibar0", funcs, |p| {
        (c * p.mu_dt - b * p.sigma_sq_dt + c * p.sigma_dw, c * p.sigma_dw - 0.5 * c * c * p.sigma_sq_dt)
    })?;
    let (m, se, infl) = controlled_mean(&f, &z, opts.control_variate);
    let pre = utility(x0, g);
    Ok(finish("v_pibar0", set, pre * m, pre.abs() * se, 0.0, infl.into_iter().map(|v| pre * v).collect()))
}

pub fn estimate_v_eps(
    paths: &FouPathSet,
    m: &dyn MarketModel,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
) -> Result<ValueEstimate> {
    check_inputs(paths, pref, x0, horizon)?;
    let funcs = all_path_functionals(paths, m)?;
    v_eps_from(paths, &funcs, pref, x0, EstimatorOptions::default())
}

pub fn estimate_v_pi0(
    paths: &FouPathSet,
    m: &dyn MarketModel,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
) -> Result<ValueEstimate> {
    check_inputs(paths, pref, x0, horizon)?;
    let funcs = all_path_functionals(paths, m)?;
    v_pi0_from(paths, &funcs, pref, x0, EstimatorOptions::default())
}

pub fn estimate_v_pibar0(
    paths: &FouPathSet,
    m: &dyn MarketModel,
    coeffs: &ExpansionCoefficients,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
) -> Result<ValueEstimate> {
    check_inputs(paths, pref, x0, horizon)?;
    let funcs = all_path_functionals(paths, m)?;
    v_pibar0_from(paths, &funcs, coeffs, pref, x0, EstimatorOptions::default())
}

/// The three values on one pass over the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTriple {
    pub v_eps: ValueEstimate,
    pub v_pi0: ValueEstimate,
    pub v_pibar0: ValueEstimate,
}

impl ValueTriple {
    /// `V^ε - V^{π⁰}` with paired SE.
    pub fn loss_pi0(&self) -> (f64, f64) {
        paired_difference(&self.v_eps, &self.v_pi0).expect("shared paths")
    }

    /// `V^ε - V^{π̄⁰}` with paired SE.
    pub fn loss_pibar0(&self) -> (f64, f64) {
        paired_difference(&self.v_eps, &self.v_pibar0).expect("shared paths")
    }
}

pub fn estimate_all(
    paths: &FouPathSet,
    m: &dyn MarketModel,
    coeffs: &ExpansionCoefficients,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
    opts: EstimatorOptions,
) -> Result<ValueTriple> {
    check_inputs(paths, pref, x0, horizon)?;
    let funcs = all_path_functionals(paths, m)?;
    Ok(ValueTriple {
        v_eps: v_eps_from(paths, &funcs, pref, x0, opts)?,
        v_pi0: v_pi0_from(paths, &funcs, pref, x0, opts)?,
        v_pibar0: v_pibar0_from(paths, &funcs, coeffs, pref, x0, opts)?,
    })
}

/// Fraction-of-wealth rule `π_t = f(Y_t) X_t`.
#[derive(Clone)]
pub enum Strategy {
    Pi0,
    PiBar0 { mu_bar: f64, sigma_bar_sq: f64 },
    Custom { name: String, fraction: Arc<dyn Fn(f64) -> f64 + Send + Sync> },
}

impl std::fmt::Debug for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Pi0 => write!(f, "Pi0"),
            Strategy::PiBar0 { mu_bar, sigma_bar_sq } => {
                write!(f, "PiBar0 {{ mu_bar: {mu_bar}, sigma_bar_sq: {sigma_bar_sq} }}")
            }
            Strategy::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Strategy {
    pub fn pibar0(coeffs: &ExpansionCoefficients) -> Self {
        Strategy::PiBar0 { mu_bar: coeffs.mu_bar, sigma_bar_sq: coeffs.sigma_bar_sq }
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Strategy::Custom { name: name.into(), fraction: Arc::new(f) }
    }

    fn name(&self) -> String {
        match self {
            Strategy::Pi0 => "wealth_pi0".into(),
            Strategy::PiBar0 { .. } => "wealth_pibar0".into(),
            Strategy::Custom { name, .. } => format!("wealth_{name}"),
        }
    }

    fn fraction(&self, y: f64, m: &dyn MarketModel, gamma: f64) -> f64 {
        match self {
            Strategy::Pi0 => m.lambda(y) / (gamma * m.sigma(y)),
            Strategy::PiBar0 { mu_bar, sigma_bar_sq } => mu_bar / (gamma * sigma_bar_sq),
            Strategy::Custom { fraction, .. } => fraction(y),
        }
    }
}

/// `E[U(X_T)]` from the exact log-wealth recursion
/// `log X_{k+1} = log X_k + (fμ - f²σ²/2) dt + fσ ΔW` with left-point coefficients.
pub fn simulate_wealth(
    strategy: &Strategy,
    paths: &FouPathSet,
    m: &dyn MarketModel,
    pref: &RiskPreference,
    x0: f64,
    horizon: f64,
) -> Result<ValueEstimate> {
    check_inputs(paths, pref, x0, horizon)?;
    let g = pref.gamma;
    let dt = paths.grid.dt;
    let results: Vec<std::result::Result<f64, Error>> = (0..paths.n_paths)
        .into_par_iter()
        .map_init(FouPath::default, |buf, i| {
            paths.path_into(i, buf);
            let mut log_x = CompensatedSum::new();
            log_x.add(x0.ln());
            for k in 0..buf.dw.len() {
                let y = buf.y[k];
                let f = strategy.fraction(y, m, g);
                if !f.is_finite() || f.abs() > MAX_FRACTION {
                    return Err(Error::Admissibility { path: i, step: k, fraction: f });
                }
                let (mu, s) = (m.mu(y), m.sigma(y));
                log_x.add((f * mu - 0.5 * f * f * s * s) * dt + f * s * buf.dw[k]);
            }
            Ok(((1.0 - g) * log_x.value()).exp() / (1.0 - g))
        })
        .collect();
    let u: Vec<f64> = results.into_iter().collect::<Result<_>>()?;
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::Estimator {
            estimator: "simulate_wealth",
            path: i,
            reason: "terminal utility overflows".into(),
        });
    }
    let (mean, se) = stats::mean_se(&u);
    let infl = u.iter().map(|v| v - mean).collect();
    Ok(finish(&strategy.name(), paths, mean, se, 0.0, infl))
}
