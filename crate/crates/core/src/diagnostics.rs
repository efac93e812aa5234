//! Estimators for the ergodic deviations that control the first-order expansion:
//!
//! - `I_T = ∫₀^T (λ²(Y_s) - λ̄²) ds`,
//! - `φ_t = E[I_T - I_t | 𝒢_t]`,
//! - `ϑ_t = ∫_t^T E[G'(Y_s) | 𝒢_t] K^ε(s - t) ds` with `G' = λλ'`,
//! - `κ_t = ∫₀^t (ϑ_s λ(Y_s) - √ε D̄) ds`.
//!
//! Given the noise up to step `k_t`, the discretized factor at a later step `k` is Gaussian with
//! mean equal to the convolution of the known noise and variance `Σ_{j < k - k_t} K̂_j²/dt`, so
//! the conditional expectations reduce to one-dimensional Gauss–Hermite sums. A nested Monte
//! Carlo estimator that resamples the future noise is kept as an oracle for that shortcut.
//!
//! Stationary samples draw a fresh history per sample and convolve history and forward noise
//! in one pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::asymptotics::{dbar, dbar_finite_horizon};
use crate::error::{invalid, Error, Result};
use crate::fou::{
    build_convolution_weights, fill_normals, generate_history_indexed, stream_rng, CausalConvolver, ConvolutionWeights,
    FouPath, FouPathSet, GridSpec, DOMAIN_FORWARD, DOMAIN_NESTED,
};
use crate::kernel::KernelParams;
use crate::model::{invariant_average, MarketModel};
use crate::quadrature::{hermite_normal_cached, GaussRule, QuadratureSpec};
use crate::stats::{self, CompensatedSum};

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl MomentEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let (mean, std_err) = stats::mean_se(xs);
        Self { mean, std_err, n: xs.len() }
    }

    /// `sqrt(mean)` for a second moment, SE by the delta method.
    fn sqrt(self) -> Self {
        let mean = self.mean.max(0.0).sqrt();
        let std_err = if mean > 0.0 { self.std_err / (2.0 * mean) } else { 0.0 };
        Self { mean, std_err, n: self.n }
    }
}

fn step_of(t: f64, g: &GridSpec) -> Result<usize> {
    if !(t >= 0.0) || t > g.horizon * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", g.horizon)));
    }
    Ok(((t / g.dt).round() as usize).min(g.n_steps))
}

/// `I_T` along one path, left-point rule.
pub fn i_functional(y: &[f64], m: &dyn MarketModel, lambda_bar_sq: f64, dt: f64, n: usize) -> f64 {
    if m.constant_sharpe() {
        return 0.0;
    }
    let mut s = CompensatedSum::new();
    for &v in &y[..n] {
        let l = m.lambda(v);
        s.add((l * l - lambda_bar_sq) * dt);
    }
    s.value()
}

/// `E[I_T²]` over the paths of a set, for `T` on the grid.
pub fn i_second_moment(
    paths: &FouPathSet,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    horizon: f64,
) -> Result<MomentEstimate> {
    let n = step_of(horizon, &paths.grid)?;
    let dt = paths.grid.dt;
    let sq: Vec<f64> = (0..paths.n_paths)
        .into_par_iter()
        .map_init(FouPath::default, |buf, i| {
            paths.path_into(i, buf);
            i_functional(&buf.y, m, lambda_bar_sq, dt, n).powi(2)
        })
        .collect();
    Ok(MomentEstimate::from_samples(&sq))
}

/// Gauss–Hermite rule for conditional expectations of `λ² - λ̄²` and `G'`.
#[derive(Debug, Clone)]
pub struct ConditionalQuadrature {
    rule: Arc<GaussRule>,
    lambda_bar_sq: f64,
    degenerate: bool,
}

impl ConditionalQuadrature {
    /// Picks the smallest node count (16 to 256, doubling) that resolves both integrands at
    /// the largest conditional variance `v_max` over means within three stationary deviations.
    pub fn new(
        m: &dyn MarketModel,
        lambda_bar_sq: f64,
        stationary_sd: f64,
        v_max: f64,
        q: &QuadratureSpec,
    ) -> Result<Self> {
        q.validate()?;
        if m.constant_sharpe() {
            return Ok(Self { rule: hermite_normal_cached(1), lambda_bar_sq, degenerate: true });
        }
        let sd = v_max.max(0.0).sqrt();
        let fs: [&dyn Fn(f64) -> f64; 2] = [&|y| m.lambda(y).powi(2) - lambda_bar_sq, &|y| m.g_prime(y)];
        let means: Vec<f64> = [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|c| c * stationary_sd).collect();
        let mut n = 16;
        let mut worst = f64::INFINITY;
        while n <= 256 {
            let (lo, hi) = (hermite_normal_cached(n), hermite_normal_cached(2 * n));
            worst = 0.0f64;
            let mut ok = true;
            for f in fs {
                for &mu in &means {
                    let a = lo.apply(|z| f(mu + sd * z));
                    let b = hi.apply(|z| f(mu + sd * z));
                    worst = worst.max((a - b).abs());
                    ok &= (a - b).abs() <= q.target(b);
                }
            }
            if ok {
                return Ok(Self { rule: lo, lambda_bar_sq, degenerate: false });
            }
            n *= 2;
        }
        Err(Error::Tolerance {
            what: "conditional Gauss-Hermite expectation".into(),
            achieved: worst,
            requested: q.abs_tol,
            partial: f64::NAN,
        })
    }

    pub fn nodes(&self) -> usize {
        self.rule.nodes.len()
    }

    fn expect(&self, f: impl Fn(f64) -> f64, mean: f64, var: f64) -> f64 {
        if var <= 0.0 {
            return f(mean);
        }
        let sd = var.sqrt();
        self.rule.apply(|z| f(mean + sd * z))
    }
}

/// `φ_t` and `ϑ_t` at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFunctionals {
    pub phi: f64,
    pub vartheta: f64,
}

/// `v_j = Σ_{i < j} K̂_i²/dt`, `j = 0 ..= n`.
fn variance_prefix(w: &ConvolutionWeights, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut s = CompensatedSum::new();
    out.push(0.0);
    for c in &w.cells[..n] {
        s.add(c * c / w.dt);
        out.push(s.value());
    }
    out
}

/// Both functionals from the conditional means `means[k]` of `y_k`, `k = kt ..= n`.
fn functionals_from_means(
    means: &[f64],
    kt: usize,
    n: usize,
    w: &ConvolutionWeights,
    vprefix: &[f64],
    m: &dyn MarketModel,
    cq: &ConditionalQuadrature,
) -> ConditionalFunctionals {
    if cq.degenerate {
        return ConditionalFunctionals { phi: 0.0, vartheta: 0.0 };
    }
    let lbs = cq.lambda_bar_sq;
    let mut phi = CompensatedSum::new();
    let mut theta = CompensatedSum::new();
    for k in kt..n {
        let (mu, v) = (means[k], vprefix[k - kt]);
        phi.add(cq.expect(|y| m.lambda(y).powi(2) - lbs, mu, v) * w.dt);
        theta.add(cq.expect(|y| m.g_prime(y), mu, v) * w.cells[k - kt]);
    }
    ConditionalFunctionals { phi: phi.value(), vartheta: theta.value() }
}

fn quadrature_for_set(
    set: &FouPathSet,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    q: &QuadratureSpec,
) -> Result<(ConditionalQuadrature, Vec<f64>)> {
    let n = set.grid.n_steps;
    let vp = variance_prefix(&set.weights, n);
    let cq = ConditionalQuadrature::new(m, lambda_bar_sq, set.weights.discrete_variance.sqrt(), vp[n], q)?;
    Ok((cq, vp))
}

/// `φ_t` and `ϑ_t` given the history of `set` and the prefix of `path` up to `t`.
pub fn conditional_functionals(
    t: f64,
    set: &FouPathSet,
    path: &FouPath,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    q: &QuadratureSpec,
) -> Result<ConditionalFunctionals> {
    let kt = step_of(t, &set.grid)?;
    let (cq, vp) = quadrature_for_set(set, m, lambda_bar_sq, q)?;
    let mut known = path.dwy.clone();
    known[kt..].iter_mut().for_each(|v| *v = 0.0);
    let mut means = Vec::new();
    set.factor_from_noise(&known, &mut means);
    Ok(functionals_from_means(&means, kt, set.grid.n_steps, &set.weights, &vp, m, &cq))
}

pub fn phi_conditional(
    t: f64,
    set: &FouPathSet,
    path: &FouPath,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    q: &QuadratureSpec,
) -> Result<f64> {
    Ok(conditional_functionals(t, set, path, m, lambda_bar_sq, q)?.phi)
}

pub fn vartheta(t: f64, set: &FouPathSet, path: &FouPath, m: &dyn MarketModel, q: &QuadratureSpec) -> Result<f64> {
    // λ̄² does not enter ϑ.
    Ok(conditional_functionals(t, set, path, m, 0.0, q)?.vartheta)
}

/// Nested Monte Carlo estimate of `φ_t` and `ϑ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedEstimate {
    pub phi: MomentEstimate,
    pub vartheta: MomentEstimate,
}

/// Resamples the forward noise after `t` `n_inner` times and averages the realized functionals.
pub fn nested_conditional(
    t: f64,
    set: &FouPathSet,
    path: &FouPath,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    n_inner: usize,
    seed: u64,
) -> Result<NestedEstimate> {
    if n_inner < 2 {
        return Err(invalid("n_inner", "at least two inner paths are needed"));
    }
    let kt = step_of(t, &set.grid)?;
    let n = set.grid.n_steps;
    let w = &set.weights;
    let samples: Vec<(f64, f64)> = (0..n_inner)
        .into_par_iter()
        .map_init(
            || (path.dwy.clone(), Vec::new()),
            |(dwy, y), j| {
                let mut rng = stream_rng(seed, DOMAIN_NESTED, j as u64);
                fill_normals(&mut rng, set.grid.dt.sqrt(), &mut dwy[kt..]);
                set.factor_from_noise(dwy, y);
                let mut phi = CompensatedSum::new();
                let mut theta = CompensatedSum::new();
                for (&yk, &cell) in y[kt..n].iter().zip(&w.cells) {
                    let l = m.lambda(yk);
                    phi.add((l * l - lambda_bar_sq) * w.dt);
                    theta.add(m.g_prime(yk) * cell);
                }
                (phi.value(), theta.value())
            },
        )
        .collect();
    let (p, th): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
    Ok(NestedEstimate { phi: MomentEstimate::from_samples(&p), vartheta: MomentEstimate::from_samples(&th) })
}

/// Draws stationary samples of the discretized factor: sample `i` uses history `i` and forward
/// stream `i` of the seed, the same streams a [`FouPathSet`] with that history would use.
#[derive(Debug)]
pub struct StationarySampler {
    pub grid: GridSpec,
    pub weights: Arc<ConvolutionWeights>,
    pub seed: u64,
    convolver: CausalConvolver,
    vprefix: Vec<f64>,
}

impl StationarySampler {
    pub fn new(p: &KernelParams, g: &GridSpec, seed: u64) -> Result<Self> {
        let weights = Arc::new(build_convolution_weights(p, g)?);
        let n_total = g.n_total();
        let convolver = CausalConvolver::new(&weights.densities(), n_total + 1);
        let vprefix = variance_prefix(&weights, g.n_steps);
        Ok(Self { grid: *g, weights, seed, convolver, vprefix })
    }

    /// History followed by forward `ΔW^Y` of sample `i`.
    pub fn noise(&self, i: usize) -> Vec<f64> {
        let mut x = generate_history_indexed(&self.grid, self.seed, i as u64).increments;
        let mut dwy = vec![0.0; self.grid.n_steps];
        let mut rng = stream_rng(self.seed, DOMAIN_FORWARD, i as u64);
        fill_normals(&mut rng, self.grid.dt.sqrt(), &mut dwy);
        x.extend_from_slice(&dwy);
        x
    }

    /// Sample `i` as a path on `[0, T]`; the forward increments are drawn exactly as
    /// [`FouPathSet`] draws path `i`, only the history differs.
    pub fn path(&self, i: usize, rho: f64) -> FouPath {
        let n = self.grid.n_steps;
        let sd = self.grid.dt.sqrt();
        let mut rng = stream_rng(self.seed, DOMAIN_FORWARD, i as u64);
        let (mut dwy, mut dw) = (vec![0.0; n], vec![0.0; n]);
        fill_normals(&mut rng, sd, &mut dwy);
        fill_normals(&mut rng, sd, &mut dw);
        let c = (1.0 - rho * rho).sqrt();
        for (w, &wy) in dw.iter_mut().zip(&dwy) {
            *w = rho * wy + c * *w;
        }
        let mut x = generate_history_indexed(&self.grid, self.seed, i as u64).increments;
        x.extend_from_slice(&dwy);
        let y = self.factor(&x);
        FouPath { dwy, dw, y }
    }

    /// `y_k`, `k = 0 ..= n_steps`, from a full noise vector.
    pub fn factor(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_total() + 1];
        self.convolver.apply(x, &mut out);
        out.split_off(self.grid.n_history)
    }

    pub fn quadrature(
        &self,
        m: &dyn MarketModel,
        lambda_bar_sq: f64,
        q: &QuadratureSpec,
    ) -> Result<ConditionalQuadrature> {
        ConditionalQuadrature::new(
            m,
            lambda_bar_sq,
            self.weights.discrete_variance.sqrt(),
            self.vprefix[self.grid.n_steps],
            q,
        )
    }

    /// `(y_{k_t}, φ_t, ϑ_t)` for sample `i`.
    fn conditional(
        &self,
        i: usize,
        kt: usize,
        m: &dyn MarketModel,
        cq: &ConditionalQuadrature,
    ) -> (f64, ConditionalFunctionals) {
        let mut x = self.noise(i);
        let start = self.grid.n_history + kt;
        x[start..].iter_mut().for_each(|v| *v = 0.0);
        let means = self.factor(&x);
        let f = functionals_from_means(&means, kt, self.grid.n_steps, &self.weights, &self.vprefix, m, cq);
        (means[kt], f)
    }
}

/// `E[λ(Y_t) ϑ_t] / √ε` over stationary samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbarMonteCarlo {
    pub eps: f64,
    pub reference_t: f64,
    pub estimate: MomentEstimate,
    /// `E[φ_t]` over the same samples; zero in the stationary regime.
    pub phi_mean: MomentEstimate,
    /// `‖φ_t‖₂`.
    pub phi_l2: MomentEstimate,
}

pub fn dbar_monte_carlo(
    sampler: &StationarySampler,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    t: f64,
    n_samples: usize,
    q: &QuadratureSpec,
) -> Result<DbarMonteCarlo> {
    if n_samples < 2 {
        return Err(invalid("n_samples", "at least two samples are needed"));
    }
    let kt = step_of(t, &sampler.grid)?;
    let cq = sampler.quadrature(m, lambda_bar_sq, q)?;
    let eps = sampler.weights.params.eps;
    let rows: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let (y, f) = sampler.conditional(i, kt, m, &cq);
            (m.lambda(y) * f.vartheta / eps.sqrt(), f.phi)
        })
        .collect();
    let (d, phi): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let phi_sq: Vec<f64> = phi.iter().map(|v| v * v).collect();
    Ok(DbarMonteCarlo {
        eps,
        reference_t: kt as f64 * sampler.grid.dt,
        estimate: MomentEstimate::from_samples(&d),
        phi_mean: MomentEstimate::from_samples(&phi),
        phi_l2: MomentEstimate::from_samples(&phi_sq).sqrt(),
    })
}

/// `E[I_T²]` over stationary samples.
pub fn i_second_moment_stationary(
    sampler: &StationarySampler,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    n_samples: usize,
) -> MomentEstimate {
    let n = sampler.grid.n_steps;
    let dt = sampler.grid.dt;
    let sq: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let y = sampler.factor(&sampler.noise(i));
            i_functional(&y, m, lambda_bar_sq, dt, n).powi(2)
        })
        .collect();
    MomentEstimate::from_samples(&sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub eps: f64,
    /// `sup_t ‖κ_t‖₂` over the evaluation grid.
    pub sup_l2: f64,
    pub t_at_sup: f64,
    /// `sup_l2 / √ε`.
    pub ratio: f64,
    pub n_samples: usize,
    pub stride: usize,
}

/// `sup_t ‖κ_t‖₂` with `ϑ` evaluated every `stride` steps and `κ` integrated left-point on that
/// coarser grid.
pub fn kappa_norm(
    sampler: &StationarySampler,
    m: &dyn MarketModel,
    lambda_bar_sq: f64,
    dbar: f64,
    n_samples: usize,
    stride: usize,
    q: &QuadratureSpec,
) -> Result<KappaReport> {
    if stride == 0 || n_samples < 2 {
        return Err(invalid("kappa_norm", "stride and sample count must be positive"));
    }
    let g = sampler.grid;
    let n = g.n_steps;
    let eps = sampler.weights.params.eps;
    let cq = sampler.quadrature(m, lambda_bar_sq, q)?;
    let evals: Vec<usize> = (0..n).step_by(stride).collect();
    let dens = sampler.weights.densities();
    let paths: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut x = sampler.noise(i);
            let dwy = x.split_off(g.n_history);
            x.resize(g.n_total(), 0.0);
            // Conditional means given the noise before the current evaluation step.
            let mut means = sampler.factor(&x);
            let mut known = 0;
            let mut kappa = vec![0.0; evals.len() + 1];
            let mut acc = CompensatedSum::new();
            for (e, &ks) in evals.iter().enumerate() {
                for (idx, &inc) in dwy.iter().enumerate().take(ks).skip(known) {
                    for k in idx + 1..=n {
                        means[k] += dens[k - 1 - idx] * inc;
                    }
                }
                known = ks;
                let f = functionals_from_means(&means, ks, n, &sampler.weights, &sampler.vprefix, m, &cq);
                let len = (evals.get(e + 1).copied().unwrap_or(n) - ks) as f64 * g.dt;
                let drift = if cq.degenerate { 0.0 } else { f.vartheta * m.lambda(means[ks]) - eps.sqrt() * dbar };
                acc.add(drift * len);
                kappa[e + 1] = acc.value();
            }
            kappa
        })
        .collect();
    let mut times: Vec<f64> = evals.iter().map(|&k| k as f64 * g.dt).collect();
    times.remove(0);
    times.push(n as f64 * g.dt);
    let (mut sup, mut t_at) = (0.0, 0.0);
    for (j, &t) in times.iter().enumerate() {
        let sq: Vec<f64> = paths.iter().map(|k| k[j + 1].powi(2)).collect();
        let l2 = stats::mean(&sq).sqrt();
        if l2 > sup {
            sup = l2;
            t_at = t;
        }
    }
    Ok(KappaReport { eps, sup_l2: sup, t_at_sup: t_at, ratio: sup / eps.sqrt(), n_samples, stride })
}

/// Inputs of [`ergodic_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicConfig {
    pub hurst: f64,
    pub rate: f64,
    pub eps_grid: Vec<f64>,
    pub grid: GridSpec,
    pub n_samples: usize,
    pub seed: u64,
    /// ε for the `D̄` cross-check.
    pub dbar_eps: f64,
    pub dbar_samples: usize,
    /// Defaults to `T/2`.
    pub reference_t: Option<f64>,
    /// ε values for the `κ` diagnostic; may be empty.
    pub kappa_eps: Vec<f64>,
    pub kappa_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicReport {
    pub eps_grid: Vec<f64>,
    pub reference_t: f64,
    pub lambda_bar_sq: f64,
    pub i_sq_mean: Vec<MomentEstimate>,
    pub phi_mean: Vec<MomentEstimate>,
    pub phi_l2: Vec<MomentEstimate>,
    pub slope_i: f64,
    pub slope_i_se: f64,
    pub slope_phi: f64,
    pub slope_phi_se: f64,
    /// Order suggested by the ergodic bounds, `1 - H`.
    pub expected_slope: f64,
    pub dbar_mc: DbarMonteCarlo,
    pub dbar_quadrature: f64,
    /// `∫₀^{(T-t)/ε} g(C_Y) K`: what `dbar_mc` estimates on a finite horizon.
    pub dbar_finite_horizon: f64,
    pub kappa: Vec<KappaReport>,
}

fn log_slope(eps: &[f64], values: &[f64]) -> (f64, f64) {
    if values.iter().any(|v| !(*v > 0.0)) || eps.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    stats::ols_slope(&lx, &ly)
}

pub fn ergodic_report(cfg: &ErgodicConfig, m: &dyn MarketModel, q: &QuadratureSpec) -> Result<ErgodicReport> {
    if cfg.eps_grid.is_empty() {
        return Err(invalid("eps_grid", "must not be empty"));
    }
    let base = KernelParams::new(cfg.hurst, cfg.rate, cfg.dbar_eps)?;
    let lbs = invariant_average(|y| m.lambda(y).powi(2), &base, q)?;
    let t = cfg.reference_t.unwrap_or(cfg.grid.horizon / 2.0);
    let mut i_sq = Vec::new();
    let mut phi_mean = Vec::new();
    let mut phi_l2 = Vec::new();
    for &eps in &cfg.eps_grid {
        let sampler = StationarySampler::new(&base.with_eps(eps)?, &cfg.grid, cfg.seed)?;
        i_sq.push(i_second_moment_stationary(&sampler, m, lbs, cfg.n_samples));
        let d = dbar_monte_carlo(&sampler, m, lbs, t, cfg.n_samples, q)?;
        phi_mean.push(d.phi_mean);
        phi_l2.push(d.phi_l2);
    }
    let (slope_i, slope_i_se) = log_slope(&cfg.eps_grid, &i_sq.iter().map(|e| e.mean).collect::<Vec<_>>());
    let (slope_phi, slope_phi_se) = log_slope(&cfg.eps_grid, &phi_l2.iter().map(|e| e.mean).collect::<Vec<_>>());
    let sampler = StationarySampler::new(&base, &cfg.grid, cfg.seed)?;
    let dbar_mc = dbar_monte_carlo(&sampler, m, lbs, t, cfg.dbar_samples, q)?;
    let dq = if m.constant_sharpe() { 0.0 } else { dbar(m, &base, q)?.value };
    let fh = if m.constant_sharpe() {
        0.0
    } else {
        let upper = (cfg.grid.horizon - dbar_mc.reference_t) / base.eps;
        dbar_finite_horizon(m, &base, upper, q)?.value
    };
    let mut kappa = Vec::new();
    for &eps in &cfg.kappa_eps {
        let s = StationarySampler::new(&base.with_eps(eps)?, &cfg.grid, cfg.seed)?;
        kappa.push(kappa_norm(&s, m, lbs, dq, cfg.n_samples, cfg.kappa_stride, q)?);
    }
    Ok(ErgodicReport {
        eps_grid: cfg.eps_grid.clone(),
        reference_t: dbar_mc.reference_t,
        lambda_bar_sq: lbs,
        i_sq_mean: i_sq,
        phi_mean,
        phi_l2,
        slope_i,
        slope_i_se,
        slope_phi,
        slope_phi_se,
        expected_slope: 1.0 - cfg.hurst,
        dbar_mc,
        dbar_quadrature: dq,
        dbar_finite_horizon: fh,
        kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fou::{generate_history, simulate_paths, HistoryRule};
    use crate::model::{paper_test_model, ConstantModel};

    fn small() -> (KernelParams, GridSpec) {
        let p = KernelParams::new(0.1, 1.0, 0.1).unwrap();
        let g = GridSpec::new(1.0, 1e-2, HistoryRule::Explicit(2.0)).unwrap();
        (p, g)
    }

    #[test]
    fn sampler_matches_path_set() {
        let (p, g) = small();
        let s = StationarySampler::new(&p, &g, 7).unwrap();
        let h = Arc::new(generate_history_indexed(&g, 7, 3));
        let set = simulate_paths(&p, &g, h, 0.0, 10, 7).unwrap();
        let y = s.factor(&s.noise(3));
        let path = set.path(3);
        for (a, b) in y.iter().zip(&path.y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let set = set.with_history(h_for(&g, 3)).unwrap();
        let correlated = StationarySampler::new(&p, &g, 7).unwrap().path(3, -0.5);
        let reference = FouPathSet::from_weights(set.weights.clone(), &g, h_for(&g, 3), -0.5, 10, 7).unwrap().path(3);
        assert_eq!(correlated.dw, reference.dw);
        assert_eq!(correlated.dwy, reference.dwy);
        for (a, b) in correlated.y.iter().zip(&reference.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn h_for(g: &GridSpec, i: u64) -> Arc<crate::fou::History> {
        Arc::new(generate_history_indexed(g, 7, i))
    }

    #[test]
    fn endpoints_and_degenerate_model() {
        let (p, g) = small();
        let set = simulate_paths(&p, &g, Arc::new(generate_history(&g, 1)), 0.0, 4, 2).unwrap();
        let path = set.path(0);
        let m = paper_test_model(&p).unwrap();
        let q = QuadratureSpec::default();
        let f = conditional_functionals(1.0, &set, &path, &m, 0.5, &q).unwrap();
        assert_eq!((f.phi, f.vartheta), (0.0, 0.0));
        let c = ConstantModel::new(0.1, 0.2).unwrap();
        let f = conditional_functionals(0.3, &set, &path, &c, 0.25, &q).unwrap();
        assert_eq!((f.phi, f.vartheta), (0.0, 0.0));
        assert_eq!(i_second_moment(&set, &c, 0.25, 1.0).unwrap().mean, 0.0);
        assert_eq!(i_second_moment(&set, &m, 0.5, 0.0).unwrap().mean, 0.0);
        let s = StationarySampler::new(&p, &g, 1).unwrap();
        let k = kappa_norm(&s, &c, 0.25, 0.0, 4, 10, &q).unwrap();
        assert_eq!(k.sup_l2, 0.0);
        assert!(conditional_functionals(1.5, &set, &path, &m, 0.5, &q).is_err());
    }

    #[test]
    fn quadrature_agrees_with_nested_monte_carlo() {
        let (p, g) = small();
        let set = simulate_paths(&p, &g, Arc::new(generate_history(&g, 4)), 0.0, 4, 9).unwrap();
        let m = paper_test_model(&p).unwrap();
        let q = QuadratureSpec::default();
        let lbs = 0.5;
        for (i, t) in [(0usize, 0.0), (1, 0.5), (2, 0.9)] {
            let path = set.path(i);
            let f = conditional_functionals(t, &set, &path, &m, lbs, &q).unwrap();
            let nested = nested_conditional(t, &set, &path, &m, lbs, 10_000, 31).unwrap();
            assert!((f.phi - nested.phi.mean).abs() < 3.0 * nested.phi.std_err, "{f:?} {nested:?}");
            assert!((f.vartheta - nested.vartheta.mean).abs() < 3.0 * nested.vartheta.std_err, "{f:?} {nested:?}");
        }
    }

    #[test]
    fn known_prefix_determines_the_current_value() {
        let (p, g) = small();
        let set = simulate_paths(&p, &g, Arc::new(generate_history(&g, 4)), 0.0, 4, 9).unwrap();
        let path = set.path(2);
        let mut known = path.dwy.clone();
        known[40..].iter_mut().for_each(|v| *v = 0.0);
        let mut means = Vec::new();
        set.factor_from_noise(&known, &mut means);
        assert_eq!(means[..=40], path.y[..=40]);
    }

    #[test]
    fn kappa_incremental_means_match_direct() {
        // With stride 1 and D̄ = 0, κ at the first step is ϑ_0 λ(y_0) dt.
        let (p, g) = small();
        let s = StationarySampler::new(&p, &g, 5).unwrap();
        let m = paper_test_model(&p).unwrap();
        let q = QuadratureSpec::default();
        let cq = s.quadrature(&m, 0.5, &q).unwrap();
        let (y, f) = s.conditional(0, 0, &m, &cq);
        let (y1, f1) = s.conditional(0, 37, &m, &cq);
        let direct = s.factor(&s.noise(0));
        assert!((y - direct[0]).abs() < 1e-12 && (y1 - direct[37]).abs() < 1e-12);
        assert!(f.vartheta.is_finite() && f1.vartheta.is_finite());
        let k = kappa_norm(&s, &m, 0.5, 0.0, 2, 1, &q).unwrap();
        assert!(k.sup_l2 > 0.0 && k.ratio.is_finite());
    }

    #[test]
    fn stationary_phi_has_mean_zero() {
        let (p, g) = small();
        let s = StationarySampler::new(&p, &g, 8).unwrap();
        let m = paper_test_model(&p).unwrap();
        let q = QuadratureSpec::default();
        let lbs = invariant_average(|y| m.lambda(y).powi(2), &p, &q).unwrap();
        let d = dbar_monte_carlo(&s, &m, lbs, 0.5, 2000, &q).unwrap();
        assert!(d.phi_mean.mean.abs() < 3.0 * d.phi_mean.std_err, "{d:?}");
        assert!(d.phi_l2.mean > 0.0);
    }
}
