//! Market coefficients as functions of the factor: Sharpe ratio `λ`, drift `μ`, volatility
//! `σ = μ/λ`, and `λ'`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::kernel::{sigma_ou_sq, KernelParams};
use crate::quadrature::{hermite_normal_cached, QuadratureSpec};
use crate::stats::{norm_cdf, norm_pdf};

/// Declared sup-norm bounds. `sigma_inf` is a positive lower bound for `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub lambda_sup: f64,
    pub lambda_prime_sup: f64,
    pub mu_sup: f64,
    pub sigma_sup: f64,
    pub sigma_inf: f64,
}

pub trait MarketModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn lambda(&self, y: f64) -> f64;
    fn lambda_prime(&self, y: f64) -> f64;
    fn mu(&self, y: f64) -> f64;
    fn sigma(&self, y: f64) -> f64;
    fn bounds(&self) -> ModelBounds;

    /// String identifying the model and its parameters; used as a cache key.
    fn cache_key(&self) -> String {
        self.name().to_string()
    }

    /// `G'(y) = (λλ')(y)` where `G = (λ² - λ̄²)/2`.
    fn g_prime(&self, y: f64) -> f64 {
        self.lambda(y) * self.lambda_prime(y)
    }

    /// True when `λ` is constant, so every first-order correction vanishes identically.
    fn constant_sharpe(&self) -> bool {
        false
    }
}

/// Test model with `λ²(y) = Φ(y/(2σ_ou))`, `μ = sλ/(s+λ)`, `σ = s/(s+λ)`, `s = 0.1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperModel {
    sigma_ou: f64,
    scale: f64,
}

impl PaperModel {
    pub fn new(sigma_ou: f64) -> Result<Self> {
        if !(sigma_ou > 0.0) || !sigma_ou.is_finite() {
            return Err(invalid("sigma_ou", format!("{sigma_ou} must be positive")));
        }
        Ok(Self { sigma_ou, scale: 0.1 })
    }

    pub fn sigma_ou(&self) -> f64 {
        self.sigma_ou
    }
}

impl MarketModel for PaperModel {
    fn name(&self) -> &str {
        "paper"
    }

    fn lambda(&self, y: f64) -> f64 {
        norm_cdf(y / (2.0 * self.sigma_ou)).sqrt()
    }

    fn lambda_prime(&self, y: f64) -> f64 {
        let l = self.lambda(y);
        if l == 0.0 {
            return 0.0;
        }
        norm_pdf(y / (2.0 * self.sigma_ou)) / (4.0 * self.sigma_ou * l)
    }

    fn g_prime(&self, y: f64) -> f64 {
        norm_pdf(y / (2.0 * self.sigma_ou)) / (4.0 * self.sigma_ou)
    }

    fn mu(&self, y: f64) -> f64 {
        let l = self.lambda(y);
        self.scale * l / (self.scale + l)
    }

    fn sigma(&self, y: f64) -> f64 {
        self.scale / (self.scale + self.lambda(y))
    }

    fn bounds(&self) -> ModelBounds {
        // sup_x φ(x)/√Φ(x) ≈ 0.6356, attained near x = -0.75.
        ModelBounds {
            lambda_sup: 1.0,
            lambda_prime_sup: 0.64 / (4.0 * self.sigma_ou),
            mu_sup: self.scale / (self.scale + 1.0),
            sigma_sup: 1.0,
            sigma_inf: self.scale / (self.scale + 1.0),
        }
    }

    fn cache_key(&self) -> String {
        format!("paper(sigma_ou={:e},scale={:e})", self.sigma_ou, self.scale)
    }
}

/// The test model with `σ_ou` taken from the kernel parameters.
pub fn paper_test_model(p: &KernelParams) -> Result<PaperModel> {
    p.validate()?;
    PaperModel::new(sigma_ou_sq(p).sqrt())
}

/// Constant drift and volatility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantModel {
    mu: f64,
    sigma: f64,
}

impl ConstantModel {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid("sigma", format!("{sigma} must be positive")));
        }
        if !mu.is_finite() {
            return Err(invalid("mu", "must be finite"));
        }
        Ok(Self { mu, sigma })
    }
}

impl MarketModel for ConstantModel {
    fn name(&self) -> &str {
        "constant"
    }
    fn lambda(&self, _y: f64) -> f64 {
        self.mu / self.sigma
    }
    fn lambda_prime(&self, _y: f64) -> f64 {
        0.0
    }
    fn mu(&self, _y: f64) -> f64 {
        self.mu
    }
    fn sigma(&self, _y: f64) -> f64 {
        self.sigma
    }
    fn bounds(&self) -> ModelBounds {
        ModelBounds {
            lambda_sup: (self.mu / self.sigma).abs(),
            lambda_prime_sup: 0.0,
            mu_sup: self.mu.abs(),
            sigma_sup: self.sigma,
            sigma_inf: self.sigma,
        }
    }
    fn cache_key(&self) -> String {
        format!("constant(mu={:e},sigma={:e})", self.mu, self.sigma)
    }
    fn constant_sharpe(&self) -> bool {
        true
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Model assembled from closures; `λ = μ/σ` is derived.
#[derive(Clone)]
pub struct CustomModel {
    name: String,
    mu: ScalarFn,
    sigma: ScalarFn,
    lambda_prime: ScalarFn,
    bounds: ModelBounds,
}

impl CustomModel {
    pub fn new(
        name: impl Into<String>,
        mu: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lambda_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        bounds: ModelBounds,
    ) -> Result<Self> {
        if !(bounds.sigma_inf > 0.0) {
            return Err(invalid("bounds.sigma_inf", "must be positive"));
        }
        Ok(Self {
            name: name.into(),
            mu: Arc::new(mu),
            sigma: Arc::new(sigma),
            lambda_prime: Arc::new(lambda_prime),
            bounds,
        })
    }
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel").field("name", &self.name).field("bounds", &self.bounds).finish_non_exhaustive()
    }
}

impl MarketModel for CustomModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn lambda(&self, y: f64) -> f64 {
        (self.mu)(y) / (self.sigma)(y)
    }
    fn lambda_prime(&self, y: f64) -> f64 {
        (self.lambda_prime)(y)
    }
    fn mu(&self, y: f64) -> f64 {
        (self.mu)(y)
    }
    fn sigma(&self, y: f64) -> f64 {
        (self.sigma)(y)
    }
    fn bounds(&self) -> ModelBounds {
        self.bounds
    }
}

/// Models selectable by name: `paper`, or `constant:<mu>:<sigma>`.
pub fn model_by_name(name: &str, p: &KernelParams) -> Result<Arc<dyn MarketModel>> {
    let name = name.trim();
    if name == "paper" {
        return Ok(Arc::new(paper_test_model(p)?));
    }
    if let Some(rest) = name.strip_prefix("constant") {
        let parts: Vec<&str> = rest.split(':').filter(|s| !s.is_empty()).collect();
        let (mu, sigma) = match parts.as_slice() {
            [] => (0.1, 0.1 / 0.5f64.sqrt()),
            [mu, sigma] => (
                mu.parse::<f64>().map_err(|e| invalid("model", e.to_string()))?,
                sigma.parse::<f64>().map_err(|e| invalid("model", e.to_string()))?,
            ),
            _ => return Err(invalid("model", format!("cannot parse `{name}`"))),
        };
        return Ok(Arc::new(ConstantModel::new(mu, sigma)?));
    }
    Err(invalid("model", format!("unknown model `{name}`")))
}

/// Bound violations found on a uniform grid over `±span`.
pub fn check_bounds(m: &dyn MarketModel, span: f64, points: usize) -> Vec<String> {
    let b = m.bounds();
    let slack = 1.0 + 1e-12;
    let mut out = Vec::new();
    for i in 0..points {
        let y = -span + 2.0 * span * i as f64 / (points - 1) as f64;
        let checks = [
            ("lambda", m.lambda(y).abs(), b.lambda_sup),
            ("lambda_prime", m.lambda_prime(y).abs(), b.lambda_prime_sup),
            ("mu", m.mu(y).abs(), b.mu_sup),
            ("sigma", m.sigma(y), b.sigma_sup),
        ];
        for (what, v, sup) in checks {
            if v > sup * slack {
                out.push(format!("{what}({y}) = {v} exceeds declared bound {sup}"));
            }
        }
        if m.sigma(y) < b.sigma_inf / slack {
            out.push(format!("sigma({y}) = {} below declared floor {}", m.sigma(y), b.sigma_inf));
        }
    }
    out
}

/// Power-utility preferences and the asset/factor correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPreference {
    pub gamma: f64,
    pub rho: f64,
}

impl RiskPreference {
    pub fn new(gamma: f64, rho: f64) -> Result<Self> {
        let p = Self { gamma, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || self.gamma == 1.0 || !self.gamma.is_finite() {
            return Err(invalid("gamma", format!("{} must be positive and != 1", self.gamma)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(invalid("rho", format!("{} not in (-1, 1)", self.rho)));
        }
        Ok(())
    }
}

/// `⟨f⟩ = E[f(Z)]`, `Z ~ N(0, σ²_ou)`, by Gauss–Hermite with node doubling from 16 to 512.
pub fn invariant_average<F: Fn(f64) -> f64>(f: F, p: &KernelParams, q: &QuadratureSpec) -> Result<f64> {
    q.validate()?;
    let s = sigma_ou_sq(p).sqrt();
    let eval = |n: usize| hermite_normal_cached(n).apply(|z| f(s * z));
    let mut n = 16;
    let mut prev = eval(n);
    while n < 512 {
        n *= 2;
        let cur = eval(n);
        let err = (cur - prev).abs();
        if err <= q.target(cur) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Tolerance {
        what: "invariant average".into(),
        achieved: f64::NAN,
        requested: q.target(prev),
        partial: prev,
    })
}
