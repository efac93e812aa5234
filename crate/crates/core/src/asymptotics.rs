//! Leading-order and first-order value approximations for the power-utility investor.
//!
//! ```text
//! v0(t,x) = x^{1-γ}/(1-γ) · exp(((1-γ)/(2γ)) λ̄² (T-t))
//! v1(t,x) = ((1-γ)/γ²) (T-t) x^{1-γ} exp(((1-γ)/(2γ)) λ̄² (T-t))
//! Q^ε     = v0 + √ε ρ D̄ v1
//! ```
//!
//! `D̄ = ∫₀^∞ g(C_Y(s)) K(s) ds` with `g(C) = E[λ(σ_ou Z) (λλ')(σ_ou Z')]`, `(Z, Z')` standard
//! bivariate normal with correlation `C`. Because `∫₀^∞ K = 0` for `H < 1/2`, the integral is
//! evaluated as `∫ (g(C_Y(s)) - g(0)) K(s) ds`: the subtracted integrand decays like
//! `s^{3H-5/2}` instead of `s^{H-3/2}`.

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use crate::error::{invalid, Error, Result};
use crate::kernel::{sigma_ou_sq, Autocorrelation, Kernel, KernelParams};
use crate::model::{invariant_average, MarketModel, RiskPreference};
use crate::quadrature::{hermite_normal_cached, integrate, integrate_with_breaks, Estimate, GaussRule, QuadratureSpec};

/// `q = γ / (γ + (1-γ)ρ²)`.
pub fn q_exponent(pref: &RiskPreference) -> f64 {
    q_exponent_raw(pref.gamma, pref.rho)
}

/// [`q_exponent`] without validation; admits `|ρ| = 1`.
pub fn q_exponent_raw(gamma: f64, rho: f64) -> f64 {
    gamma / (gamma + (1.0 - gamma) * rho * rho)
}

fn check_state(t: f64, x: f64, horizon: f64) -> Result<()> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth x = {x} must be positive")));
    }
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain(format!("time t = {t} outside [0, {horizon}]")));
    }
    Ok(())
}

pub fn utility(x: f64, gamma: f64) -> f64 {
    x.powf(1.0 - gamma) / (1.0 - gamma)
}

pub fn v0(t: f64, x: f64, pref: &RiskPreference, lambda_bar_sq: f64, horizon: f64) -> Result<f64> {
    check_state(t, x, horizon)?;
    let g = pref.gamma;
    Ok(utility(x, g) * ((1.0 - g) / (2.0 * g) * lambda_bar_sq * (horizon - t)).exp())
}

pub fn v1(t: f64, x: f64, pref: &RiskPreference, lambda_bar_sq: f64, horizon: f64) -> Result<f64> {
    check_state(t, x, horizon)?;
    let g = pref.gamma;
    let tau = horizon - t;
    Ok((1.0 - g) / (g * g) * tau * x.powf(1.0 - g) * ((1.0 - g) / (2.0 * g) * lambda_bar_sq * tau).exp())
}

/// `Q^ε(t, x) = v0 + √ε ρ D̄ v1`.
pub fn q_eps_approx(
    t: f64,
    x: f64,
    eps: f64,
    pref: &RiskPreference,
    coeffs: &ExpansionCoefficients,
    horizon: f64,
) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(invalid("eps", format!("{eps} must be non-negative")));
    }
    let lead = v0(t, x, pref, coeffs.lambda_bar_sq, horizon)?;
    let corr = v1(t, x, pref, coeffs.lambda_bar_sq, horizon)?;
    Ok(lead + eps.sqrt() * pref.rho * coeffs.dbar * corr)
}

/// Leading-order strategy `π⁰ = μ(y)/(γσ²(y)) · x`, in dollars.
pub fn pi0(x: f64, y: f64, m: &dyn MarketModel, pref: &RiskPreference) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth x = {x} must be positive")));
    }
    let s = m.sigma(y);
    if !(s > 0.0) {
        return Err(Error::Domain(format!("sigma({y}) = {s} is not positive")));
    }
    Ok(m.lambda(y) / (pref.gamma * s) * x)
}

/// Factor-independent strategy `π̄⁰ = μ̄/(γσ̄²) · x`.
pub fn pibar0(x: f64, coeffs: &ExpansionCoefficients, pref: &RiskPreference) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("wealth x = {x} must be positive")));
    }
    Ok(coeffs.mu_bar / (pref.gamma * coeffs.sigma_bar_sq) * x)
}

/// Standard bivariate normal law with correlation `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateGaussianDensity {
    pub c: f64,
}

impl BivariateGaussianDensity {
    pub fn new(c: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&c) {
            return Err(invalid("c", format!("{c} not in [-1, 1]")));
        }
        Ok(Self { c })
    }

    /// Density; zero off the diagonal line in the degenerate cases `|c| = 1`.
    pub fn pdf(&self, z: f64, zp: f64) -> f64 {
        let d = 1.0 - self.c * self.c;
        if d <= 0.0 {
            return 0.0;
        }
        let q = (z * z - 2.0 * self.c * z * zp + zp * zp) / d;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * d.sqrt())
    }

    /// `E[f(Z) h(Z')]` with `Z' = cZ + √(1-c²) W` and an `n × n` Gauss–Hermite product rule.
    pub fn expectation<F: Fn(f64) -> f64, G: Fn(f64) -> f64>(&self, f: F, h: G, n: usize) -> f64 {
        let rule = hermite_normal_cached(n);
        let s = (1.0 - self.c * self.c).max(0.0).sqrt();
        let mut total = 0.0;
        for (&z, &wz) in rule.nodes.iter().zip(&rule.weights) {
            let fz = f(z);
            if fz == 0.0 {
                continue;
            }
            let inner: f64 = rule.nodes.iter().zip(&rule.weights).map(|(&w, &ww)| ww * h(self.c * z + s * w)).sum();
            total += wz * fz * inner;
        }
        total
    }
}

/// `g(C) = E[λ(σZ) G'(σZ')]` on a fixed product rule, with `λ` tabulated at the nodes.
struct PairIntegrand<'a> {
    model: &'a dyn MarketModel,
    sigma: f64,
    rule: Arc<GaussRule>,
    lambda_at_nodes: Vec<f64>,
}

impl<'a> PairIntegrand<'a> {
    fn with_nodes(model: &'a dyn MarketModel, sigma: f64, n: usize) -> Self {
        let rule = hermite_normal_cached(n);
        let lambda_at_nodes = rule.nodes.iter().map(|&z| model.lambda(sigma * z)).collect();
        Self { model, sigma, rule, lambda_at_nodes }
    }

    /// Doubles the node count until `g` is stable at a spread of correlations.
    fn new(model: &'a dyn MarketModel, sigma: f64, q: &QuadratureSpec) -> Result<Self> {
        let probes = [0.0, 0.5, 0.9, 0.999];
        let mut n = 24;
        let mut cur = Self::with_nodes(model, sigma, n);
        loop {
            let next = Self::with_nodes(model, sigma, 2 * n);
            let worst = probes
                .iter()
                .map(|&c| (cur.g(c) - next.g(c)).abs() - 0.01 * q.target(next.g(c)))
                .fold(f64::NEG_INFINITY, f64::max);
            if worst <= 0.0 {
                return Ok(cur);
            }
            if n >= 128 {
                return Err(Error::Tolerance {
                    what: "bivariate Gauss-Hermite".into(),
                    achieved: worst,
                    requested: q.abs_tol,
                    partial: next.g(0.5),
                });
            }
            n *= 2;
            cur = next;
        }
    }

    fn g(&self, c: f64) -> f64 {
        let c = c.clamp(-1.0, 1.0);
        let s = (1.0 - c * c).max(0.0).sqrt();
        let nodes = &self.rule.nodes;
        let weights = &self.rule.weights;
        let mut total = 0.0;
        for i in 0..nodes.len() {
            let l = self.lambda_at_nodes[i];
            if l == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for j in 0..nodes.len() {
                inner += weights[j] * self.model.g_prime(self.sigma * (c * nodes[i] + s * nodes[j]));
            }
            total += weights[i] * l * inner;
        }
        total
    }

    /// `g'(0) = E[Z λ(σZ)] E[Z G'(σZ)]` (first Hermite coefficients).
    fn slope_at_zero(&self) -> f64 {
        let nodes = &self.rule.nodes;
        let w = &self.rule.weights;
        let a: f64 = (0..nodes.len()).map(|i| w[i] * nodes[i] * self.lambda_at_nodes[i]).sum();
        let b: f64 = (0..nodes.len()).map(|i| w[i] * nodes[i] * self.model.g_prime(self.sigma * nodes[i])).sum();
        a * b
    }
}

/// Pieces shared by [`dbar`] and [`dbar_finite_horizon`].
struct DbarIntegral<'a> {
    params: KernelParams,
    kernel: Kernel,
    corr: Autocorrelation,
    pair: PairIntegrand<'a>,
    c_inf: f64,
    inner_spec: QuadratureSpec,
}

impl<'a> DbarIntegral<'a> {
    fn new(m: &'a dyn MarketModel, p: &KernelParams, q: &QuadratureSpec) -> Result<Self> {
        q.validate()?;
        let params = KernelParams::new(p.hurst, p.rate, 1.0)?;
        let sigma = sigma_ou_sq(&params).sqrt();
        let pair = PairIntegrand::new(m, sigma, q)?;
        let c_inf = pair.g(0.0);
        let inner_spec = *q;
        Ok(Self { params, kernel: Kernel::new(params)?, corr: Autocorrelation::new(&params)?, pair, c_inf, inner_spec })
    }

    fn integrand(&self, s: f64) -> Result<f64> {
        let c = self.corr.eval(s, &self.inner_spec)?;
        Ok((self.pair.g(c) - self.c_inf) * self.kernel.eval(s)?)
    }

    /// `∫₀^upper (g(C_Y(s)) - g(0)) K(s) ds`; `upper = None` means `∞` with an analytic tail.
    fn subtracted(&self, upper: Option<f64>, q: &QuadratureSpec) -> Result<Estimate> {
        let a = self.params.rate;
        let alpha = self.params.alpha();
        let failure: RwLock<Option<Error>> = RwLock::new(None);
        let guard = |r: Result<f64>| match r {
            Ok(v) => v,
            Err(e) => {
                failure.write().get_or_insert(e);
                0.0
            }
        };
        let s1 = match upper {
            Some(u) => u.min(1.0 / a),
            None => 1.0 / a,
        };
        // Near zero: s = s1 u^{1/α} absorbs the s^{α-1} singularity of the kernel.
        let head = {
            let mut breaks: Vec<f64> = (0..=12).map(|k| 10f64.powi(k - 12)).collect();
            breaks.insert(0, 0.0);
            integrate_with_breaks(
                |u: f64| {
                    if u <= 0.0 {
                        return 0.0;
                    }
                    let s = s1 * u.powf(1.0 / alpha);
                    guard(self.integrand(s)) * s1 / alpha * u.powf(1.0 / alpha - 1.0)
                },
                &breaks,
                q,
                "dbar head",
            )?
        };
        if let Some(e) = failure.write().take() {
            return Err(e);
        }
        let end = match upper {
            Some(u) if u <= s1 => return Ok(head),
            Some(u) => u,
            None => self.truncation_point(q),
        };
        let (v0, v1) = (s1.ln(), end.ln());
        let mut breaks = vec![v0];
        let mut v = v0 + 0.5;
        while v < v1 {
            breaks.push(v);
            v += 0.5;
        }
        breaks.push(v1);
        let body = integrate_with_breaks(|v: f64| guard(self.integrand(v.exp())) * v.exp(), &breaks, q, "dbar body")?;
        if let Some(e) = failure.write().take() {
            return Err(e);
        }
        let mut total = head + body;
        if upper.is_none() {
            let tail = self.tail(end);
            total = total + tail;
        }
        Ok(total)
    }

    /// Large-lag behaviour: `C_Y(s) ≈ A s^{2H-2}`, `K(s) ≈ -c s^{H-3/2}`, `g - g(0) ≈ g'(0) C`.
    fn tail_coefficient(&self) -> f64 {
        let h = self.params.hurst;
        if self.params.is_markov() {
            return 0.0;
        }
        let a = self.params.rate;
        let alpha = self.params.alpha();
        let beta = 1.0 - 2.0 * h;
        let amp = 2.0 * (std::f64::consts::PI * h).sin() / std::f64::consts::PI
            * libm::tgamma(beta + 1.0)
            * (0.5 * std::f64::consts::PI * beta).cos()
            / a.powf(beta + 1.0);
        let c = (1.0 - alpha) / (a * libm::tgamma(alpha));
        -self.pair.slope_at_zero() * amp * c
    }

    fn tail(&self, end: f64) -> Estimate {
        let h = self.params.hurst;
        if self.params.is_markov() {
            return Estimate { value: 0.0, error: 0.0 };
        }
        let expo = 2.5 - 3.0 * h;
        let value = self.tail_coefficient() * end.powf(-expo) / expo;
        // Next corrections are relatively O(1/(a s)) and O(C_Y(s)).
        let a = self.params.rate;
        let rel = 3.0 / (a * end) + end.powf(2.0 * h - 2.0);
        Estimate { value, error: value.abs() * rel }
    }

    fn truncation_point(&self, q: &QuadratureSpec) -> f64 {
        let a = self.params.rate;
        if self.params.is_markov() {
            // (g - g(0)) e^{-as} = O(e^{-2as}).
            return (40.0 / a).max(-(q.abs_tol * a).ln() / a);
        }
        let mut end = 100.0 / a;
        while self.tail(end).error > 0.1 * q.abs_tol && end < 1e12 / a {
            end *= 2.0;
        }
        end
    }

    /// `∫₀^∞ K`: zero below the Markov limit, `1/a` at it.
    fn kernel_mass(&self) -> f64 {
        if self.params.is_markov() {
            1.0 / self.params.rate
        } else {
            0.0
        }
    }
}

fn check_result(what: &str, est: Estimate, q: &QuadratureSpec) -> Result<Estimate> {
    if !est.value.is_finite() {
        return Err(Error::Tolerance {
            what: what.into(),
            achieved: f64::INFINITY,
            requested: q.abs_tol,
            partial: est.value,
        });
    }
    Ok(est)
}

/// `D̄` with its error estimate. `p.eps` is ignored.
pub fn dbar(m: &dyn MarketModel, p: &KernelParams, q: &QuadratureSpec) -> Result<Estimate> {
    let d = DbarIntegral::new(m, p, q)?;
    let body = d.subtracted(None, q)?;
    let value = body.value + d.c_inf * d.kernel_mass();
    check_result("dbar", Estimate { value, error: body.error }, q)
}

/// `∫₀^L g(C_Y(s)) K(s) ds`: the finite-lag counterpart of [`dbar`]. The diagnostics estimator
/// `E[λ(Y_t) ϑ_t]/√ε` converges to this with `L = (T - t)/ε` as the time step goes to zero.
pub fn dbar_finite_horizon(m: &dyn MarketModel, p: &KernelParams, upper: f64, q: &QuadratureSpec) -> Result<Estimate> {
    if !(upper > 0.0) {
        return Err(invalid("upper", format!("{upper} must be positive")));
    }
    let d = DbarIntegral::new(m, p, q)?;
    let body = d.subtracted(Some(upper), q)?;
    let value = body.value + d.c_inf * d.kernel.antiderivative(upper);
    check_result("dbar_finite_horizon", Estimate { value, error: body.error }, q)
}

/// `D̄' = ∫₀^∞ g(e^{-as}) e^{-as} ds = (1/a) ∫₀¹ g(C) dC` with `σ_ou = (2a)^{-1/2}`.
pub fn dbar_prime(m: &dyn MarketModel, a: f64, q: &QuadratureSpec) -> Result<Estimate> {
    if !(a > 0.0) {
        return Err(invalid("rate", format!("{a} must be positive")));
    }
    q.validate()?;
    let pair = PairIntegrand::new(m, (0.5 / a).sqrt(), q)?;
    let est = integrate(|c: f64| pair.g(c), 0.0, 1.0, q, "dbar_prime")?;
    check_result("dbar_prime", Estimate { value: est.value / a, error: est.error / a }, q)
}

type DbarKey = String;

fn dbar_cache() -> &'static RwLock<HashMap<DbarKey, Estimate>> {
    static CACHE: OnceLock<RwLock<HashMap<DbarKey, Estimate>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// [`dbar`] memoized on (model, H, a, tolerances).
pub fn dbar_cached(m: &dyn MarketModel, p: &KernelParams, q: &QuadratureSpec) -> Result<Estimate> {
    let key =
        format!("{}|{:e}|{:e}|{:e}|{:e}|{}", m.cache_key(), p.hurst, p.rate, q.abs_tol, q.rel_tol, q.max_subdivisions);
    if let Some(hit) = dbar_cache().read().get(&key) {
        return Ok(*hit);
    }
    let est = dbar(m, p, q)?;
    dbar_cache().write().insert(key, est);
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCoefficients {
    pub lambda_bar_sq: f64,
    pub mu_bar: f64,
    pub sigma_bar_sq: f64,
    pub q: f64,
    pub dbar: f64,
    pub dbar_err: f64,
    pub dbar_prime: f64,
}

impl ExpansionCoefficients {
    pub fn compute(m: &dyn MarketModel, p: &KernelParams, pref: &RiskPreference, q: &QuadratureSpec) -> Result<Self> {
        pref.validate()?;
        let lambda_bar_sq = invariant_average(|y| m.lambda(y).powi(2), p, q)?;
        let mu_bar = invariant_average(|y| m.mu(y), p, q)?;
        let sigma_bar_sq = invariant_average(|y| m.sigma(y).powi(2), p, q)?;
        let d = dbar_cached(m, p, q)?;
        let d_prime = dbar_prime(m, p.rate, q)?;
        Ok(Self {
            lambda_bar_sq,
            mu_bar,
            sigma_bar_sq,
            q: q_exponent(pref),
            dbar: d.value,
            dbar_err: d.error,
            dbar_prime: d_prime.value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{paper_test_model, ConstantModel};
    use approx::assert_relative_eq;

    fn pref() -> RiskPreference {
        RiskPreference::new(0.4, -0.5).unwrap()
    }

    #[test]
    fn q_examples() {
        assert_eq!(q_exponent(&RiskPreference::new(0.4, 0.0).unwrap()), 1.0);
        assert_relative_eq!(q_exponent_raw(0.4, 1.0), 0.4, epsilon = 1e-15);
        assert_relative_eq!(q_exponent_raw(0.4, -1.0), 0.4, epsilon = 1e-15);
        assert_relative_eq!(q_exponent(&pref()), 0.727273, epsilon = 1e-6);
    }

    #[test]
    fn value_examples() {
        let p = pref();
        assert_relative_eq!(v0(1.0, 2.0, &p, 0.5, 1.0).unwrap(), utility(2.0, 0.4));
        assert_relative_eq!(v0(0.3, 2.0, &p, 0.0, 1.0).unwrap(), utility(2.0, 0.4));
        assert_relative_eq!(v0(0.0, 1.0, &p, 0.5, 1.0).unwrap(), 2.42498, epsilon = 1e-5);
        assert_eq!(v1(1.0, 1.0, &p, 0.5, 1.0).unwrap(), 0.0);
        assert_relative_eq!(v1(0.0, 1.0, &p, 0.5, 1.0).unwrap(), 5.456218, epsilon = 1e-6);
        let r = v1(0.25, 1.7, &p, 0.5, 1.0).unwrap() / v0(0.25, 1.7, &p, 0.5, 1.0).unwrap();
        assert_relative_eq!(r, 0.36 * 0.75 / 0.16, max_relative = 1e-14);
        assert!(v0(0.0, 0.0, &p, 0.5, 1.0).is_err());
        assert!(v1(0.0, -1.0, &p, 0.5, 1.0).is_err());
    }

    #[test]
    fn v0_time_derivative() {
        let p = pref();
        let h = 1e-5;
        let t = 0.4;
        let d = (v0(t + h, 1.3, &p, 0.5, 1.0).unwrap() - v0(t - h, 1.3, &p, 0.5, 1.0).unwrap()) / (2.0 * h);
        let rhs = -(0.6 / 0.8) * 0.5 * v0(t, 1.3, &p, 0.5, 1.0).unwrap();
        assert_relative_eq!(d, rhs, max_relative = 1e-8);
    }

    fn coeffs(dbar: f64) -> ExpansionCoefficients {
        ExpansionCoefficients {
            lambda_bar_sq: 0.5,
            mu_bar: 0.087,
            sigma_bar_sq: 0.0176,
            q: 0.727273,
            dbar,
            dbar_err: 0.0,
            dbar_prime: 0.0,
        }
    }

    #[test]
    fn q_eps_structure() {
        let p = pref();
        let c = coeffs(0.3);
        assert_eq!(q_eps_approx(0.0, 1.0, 0.0, &p, &c, 1.0).unwrap(), v0(0.0, 1.0, &p, 0.5, 1.0).unwrap());
        assert_relative_eq!(q_eps_approx(1.0, 1.0, 0.01, &p, &c, 1.0).unwrap(), utility(1.0, 0.4));
        // Affine in √ε with slope ρ D̄ v1.
        let f = |r: f64| q_eps_approx(0.0, 1.0, r * r, &p, &c, 1.0).unwrap();
        let slope = (f(0.2) - f(0.1)) / 0.1;
        assert_relative_eq!(slope, -0.5 * 0.3 * v1(0.0, 1.0, &p, 0.5, 1.0).unwrap(), max_relative = 1e-12);
        // Negative correction for γ < 1, ρ < 0, D̄ > 0.
        assert!(f(0.1) < f(0.0));
        assert!(q_eps_approx(0.0, 1.0, -0.1, &p, &c, 1.0).is_err());
    }

    #[test]
    fn strategies() {
        let kp = KernelParams::new(0.1, 1.0, 1.0).unwrap();
        let m = paper_test_model(&kp).unwrap();
        let p = pref();
        let a = pi0(1.0, 0.0, &m, &p).unwrap();
        let expected = 0.5f64.sqrt() / (0.4 * (0.1 / (0.1 + 0.5f64.sqrt())));
        assert_relative_eq!(a, expected, max_relative = 1e-14);
        assert!((a / 14.260 - 1.0).abs() < 1e-3);
        assert_relative_eq!(pi0(2.0, 0.3, &m, &p).unwrap(), 2.0 * pi0(1.0, 0.3, &m, &p).unwrap());
        assert_eq!(pi0(1.0, 0.0, &ConstantModel::new(0.0, 0.2).unwrap(), &p).unwrap(), 0.0);
        assert!(pi0(0.0, 0.0, &m, &p).is_err());
        let c = coeffs(0.0);
        assert_relative_eq!(pibar0(1.0, &c, &p).unwrap(), 12.358, epsilon = 1e-3);
        assert_relative_eq!(pibar0(3.0, &c, &p).unwrap(), 3.0 * pibar0(1.0, &c, &p).unwrap());
        let mut z = c;
        z.mu_bar = 0.0;
        assert_eq!(pibar0(1.0, &z, &p).unwrap(), 0.0);
    }

    #[test]
    fn bivariate_density_moments() {
        for &c in &[-0.7, 0.0, 0.4, 0.95] {
            let d = BivariateGaussianDensity::new(c).unwrap();
            assert_relative_eq!(d.expectation(|_| 1.0, |_| 1.0, 20), 1.0, epsilon = 1e-13);
            assert_relative_eq!(d.expectation(|z| z, |z| z, 20), c, epsilon = 1e-13);
            assert_relative_eq!(d.expectation(|z| z * z, |_| 1.0, 20), 1.0, epsilon = 1e-13);
            // Density integrates to one on a crude grid.
            let h = 0.05;
            let mut tot = 0.0;
            for i in -200..=200 {
                for j in -200..=200 {
                    tot += d.pdf(i as f64 * h, j as f64 * h) * h * h;
                }
            }
            assert!((tot - 1.0).abs() < 1e-6, "{tot}");
        }
        assert!(BivariateGaussianDensity::new(1.5).is_err());
    }

    #[test]
    fn constant_sharpe_gives_zero_dbar() {
        let kp = KernelParams::new(0.1, 1.0, 1.0).unwrap();
        let m = ConstantModel::new(0.1, 0.2).unwrap();
        let q = QuadratureSpec::default();
        assert_eq!(dbar(&m, &kp, &q).unwrap().value, 0.0);
        assert_eq!(dbar_prime(&m, 1.0, &q).unwrap().value, 0.0);
    }

    /// Reference computed independently: C_Y from QUADPACK's cosine-weighted Fourier integral
    /// split on a log grid, the kernel by direct quadrature, and a 100² Hermite product rule.
    const DBAR_REFERENCE_H01: f64 = 1.326712072956e-5;

    #[test]
    fn paper_dbar_matches_reference() {
        let kp = KernelParams::new(0.1, 1.0, 1.0).unwrap();
        let m = paper_test_model(&kp).unwrap();
        let q = QuadratureSpec::default();
        let d = dbar(&m, &kp, &q).unwrap();
        assert!(d.value > 0.0);
        assert!((d.value - DBAR_REFERENCE_H01).abs() < 1e-14, "{d:?}");
        assert!(d.error < 1e-9, "{d:?}");
        let cached = dbar_cached(&m, &kp, &q).unwrap();
        assert_eq!(cached, dbar_cached(&m, &kp, &q).unwrap());
    }

    #[test]
    fn markov_dbar_equals_dbar_prime() {
        let kp = KernelParams::new(0.5, 1.0, 1.0).unwrap();
        let m = paper_test_model(&kp).unwrap();
        let q = QuadratureSpec::default();
        let d = dbar(&m, &kp, &q).unwrap();
        let dp = dbar_prime(&m, 1.0, &q).unwrap();
        assert!((d.value - dp.value).abs() < 1e-9, "{} vs {}", d.value, dp.value);
    }

    /// Trapezoid on a 2001² grid over [-8, 8]² against the raw correlated density, and a
    /// trapezoid in log s over [1e-3, 40] with the head below 1e-3 taken at C = 1.
    #[test]
    fn dbar_prime_matches_brute_force_grid() {
        let a = 1.0;
        let kp = KernelParams::new(0.5, a, 1.0).unwrap();
        let m = paper_test_model(&kp).unwrap();
        let q = QuadratureSpec::default();
        let dp = dbar_prime(&m, a, &q).unwrap();
        let sigma = (0.5 / a).sqrt();
        let n = 2001;
        let h = 16.0 / (n - 1) as f64;
        let zs: Vec<f64> = (0..n).map(|i| -8.0 + i as f64 * h).collect();
        let lam: Vec<f64> = zs.iter().map(|&z| m.lambda(sigma * z)).collect();
        let gp: Vec<f64> = zs.iter().map(|&z| m.g_prime(sigma * z)).collect();
        let trap = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let g_grid = |c: f64| {
            let d = BivariateGaussianDensity::new(c).unwrap();
            let mut tot = 0.0;
            for i in 0..n {
                let mut inner = 0.0;
                for j in 0..n {
                    inner += trap(j) * gp[j] * d.pdf(zs[i], zs[j]);
                }
                tot += trap(i) * lam[i] * inner;
            }
            tot * h * h
        };
        let n_s = 48;
        let (l0, l1) = (1e-3f64.ln(), 40f64.ln());
        let hs = (l1 - l0) / (n_s - 1) as f64;
        let mut body = 0.0;
        for k in 0..n_s {
            let s = (l0 + k as f64 * hs).exp();
            let c = (-a * s).exp();
            let wt = if k == 0 || k == n_s - 1 { 0.5 } else { 1.0 };
            body += wt * g_grid(c) * c * s * hs;
        }
        // g(C) at C → 1 is the diagonal expectation.
        let g1 = BivariateGaussianDensity::new(1.0).unwrap().expectation(
            |z| m.lambda(sigma * z),
            |z| m.g_prime(sigma * z),
            64,
        );
        let head = g1 * (1.0 - (-a * 1e-3f64).exp()) / a;
        let oracle = head + body;
        assert!((dp.value - oracle).abs() < 1e-4 * dp.value, "{} vs {oracle}", dp.value);
    }
}
