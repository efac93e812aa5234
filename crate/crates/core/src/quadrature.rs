//! Quadrature building blocks shared by the kernel, coefficient and diagnostic code.
//!
//! * [`integrate`]: globally adaptive 21-point Gauss–Kronrod on a finite interval.
//! * [`GaussRule`]: fixed Gauss rules built by the Golub–Welsch eigenvalue method
//!   (Legendre, Jacobi on `[0, 1]`, and Hermite for the standard normal law).
//! * [`euler_sum`]: repeated-averaging (Euler) acceleration of alternating series.

use nalgebra::{DMatrix, SymmetricEigen};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use crate::error::{invalid, Error, Result};

/// Tolerances for every adaptive routine in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { abs_tol: 1e-12, rel_tol: 1e-10, max_subdivisions: 1000 }
    }
}

impl QuadratureSpec {
    pub fn new(abs_tol: f64, rel_tol: f64, max_subdivisions: usize) -> Result<Self> {
        let spec = Self { abs_tol, rel_tol, max_subdivisions };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !self.abs_tol.is_finite() {
            return Err(invalid("abs_tol", "must be positive and finite"));
        }
        if !(self.rel_tol > 0.0) || !self.rel_tol.is_finite() {
            return Err(invalid("rel_tol", "must be positive and finite"));
        }
        if self.max_subdivisions == 0 {
            return Err(invalid("max_subdivisions", "must be at least 1"));
        }
        Ok(())
    }

    /// Combined tolerance for a quantity of magnitude `value`.
    pub fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value.abs())
    }
}

/// Value of an integral together with an estimate of its absolute error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl std::ops::Add for Estimate {
    type Output = Estimate;
    fn add(self, rhs: Estimate) -> Estimate {
        Estimate { value: self.value + rhs.value, error: self.error + rhs.error }
    }
}

// 21-point Kronrod extension of the 10-point Gauss rule (QUADPACK qk21).
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_059_5,
    0.865_063_366_688_984_510_732_096_688_423_5,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_114_9,
    0.562_757_134_668_604_683_339_000_099_272_7,
    0.433_395_394_129_247_190_799_265_943_165_8,
    0.294_392_862_701_460_198_131_126_603_103_9,
    0.148_874_338_981_631_210_884_826_001_129_7,
    0.0,
];
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_19,
    0.032_558_162_307_964_727_478_818_972_459_39,
    0.054_755_896_574_351_996_031_381_300_244_58,
    0.075_039_674_810_919_952_767_043_140_916_19,
    0.093_125_454_583_697_605_535_065_465_083_37,
    0.109_387_158_802_297_641_899_210_590_325_8,
    0.123_491_976_262_065_851_077_958_109_831_1,
    0.134_709_217_311_473_325_928_054_001_771_7,
    0.142_775_938_577_060_080_797_094_273_138_7,
    0.147_739_104_901_338_491_374_841_515_972_1,
    0.149_445_554_002_916_905_664_936_468_389_8,
];
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_33,
    0.149_451_349_150_580_593_145_776_339_657_7,
    0.219_086_362_515_982_043_995_534_934_228_2,
    0.269_266_719_309_996_355_091_226_921_569_5,
    0.295_524_224_714_752_870_173_892_994_651_3,
];

fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Estimate {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = WGK[10] * fc;
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (1.0_f64).min((200.0 * error / res_asc).powf(1.5));
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Estimate { value, error }
}

#[derive(Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    est: Estimate,
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec, what: &str) -> Result<Estimate> {
    integrate_with_breaks(f, &[a, b], spec, what)
}

/// Adaptive Gauss–Kronrod with user-supplied initial break points (sorted, first and last are the
/// integration limits).
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    breaks: &[f64],
    spec: &QuadratureSpec,
    what: &str,
) -> Result<Estimate> {
    assert!(breaks.len() >= 2, "need at least two break points");
    let mut segs: Vec<Segment> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| Segment { a: w[0], b: w[1], est: gk21(&f, w[0], w[1]) })
        .collect();
    if segs.is_empty() {
        return Ok(Estimate::default());
    }
    loop {
        let total = segs.iter().fold(Estimate::default(), |acc, s| acc + s.est);
        if !total.value.is_finite() {
            return Err(Error::Domain(format!("{what}: integrand is not finite")));
        }
        let target = spec.target(total.value);
        if total.error <= target {
            return Ok(total);
        }
        let (idx, worst) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.est.error.total_cmp(&y.1.est.error))
            .map(|(i, s)| (i, *s))
            .expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        let too_small = (worst.b - worst.a).abs() <= 1e3 * f64::EPSILON * mid.abs().max(f64::MIN_POSITIVE);
        if segs.len() >= spec.max_subdivisions || too_small {
            return Err(Error::Tolerance {
                what: what.to_string(),
                achieved: total.error,
                requested: target,
                partial: total.value,
            });
        }
        let left = Segment { a: worst.a, b: mid, est: gk21(&f, worst.a, mid) };
        let right = Segment { a: mid, b: worst.b, est: gk21(&f, mid, worst.b) };
        segs[idx] = left;
        segs.push(right);
    }
}

/// Nodes and weights of a fixed interpolatory rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the three-term recurrence.
    /// `diag[k]` are the recurrence shifts, `offdiag_sq[k]` (k >= 1) the squared couplings,
    /// `mu0` the total mass of the weight function.
    fn golub_welsch(diag: &[f64], offdiag_sq: &[f64], mu0: f64) -> Self {
        let n = diag.len();
        let mut jm = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            jm[(k, k)] = diag[k];
            if k + 1 < n {
                let b = offdiag_sq[k + 1].sqrt();
                jm[(k, k + 1)] = b;
                jm[(k + 1, k)] = b;
            }
        }
        let eig = SymmetricEigen::new(jm);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], mu0 * v0 * v0)
            })
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    /// Gauss–Legendre on `[-1, 1]`.
    pub fn legendre(n: usize) -> Self {
        let diag = vec![0.0; n];
        let off: Vec<f64> = (0..n)
            .map(|k| {
                let k = k as f64;
                k * k / (4.0 * k * k - 1.0)
            })
            .collect();
        Self::golub_welsch(&diag, &off, 2.0)
    }

    /// Gauss–Jacobi rule for `∫₀¹ v^beta f(v) dv`, `beta > -1`.
    pub fn jacobi_unit(n: usize, beta: f64) -> Self {
        assert!(beta > -1.0, "Jacobi exponent must exceed -1");
        // Weight (1+x)^beta on [-1, 1] (Jacobi with a = 0, b = beta).
        let (a, b) = (0.0_f64, beta);
        let ab = a + b;
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n];
        for k in 0..n {
            let kf = k as f64;
            let s = 2.0 * kf + ab;
            diag[k] = if k == 0 { (b - a) / (ab + 2.0) } else { (b * b - a * a) / (s * (s + 2.0)) };
            if k >= 1 {
                off[k] = 4.0 * kf * (kf + a) * (kf + b) * (kf + ab) / (s * s * (s + 1.0) * (s - 1.0));
            }
        }
        let mu0 = 2f64.powf(ab + 1.0) * libm::tgamma(a + 1.0) * libm::tgamma(b + 1.0) / libm::tgamma(ab + 2.0);
        let rule = Self::golub_welsch(&diag, &off, mu0);
        let scale = 2f64.powf(-b - 1.0);
        Self {
            nodes: rule.nodes.iter().map(|x| 0.5 * (x + 1.0)).collect(),
            weights: rule.weights.iter().map(|w| w * scale).collect(),
        }
    }

    /// Gauss–Hermite rule for `E[f(Z)]`, `Z ~ N(0, 1)` (weights sum to one).
    pub fn hermite_normal(n: usize) -> Self {
        let diag = vec![0.0; n];
        let off: Vec<f64> = (0..n).map(|k| k as f64).collect();
        Self::golub_welsch(&diag, &off, 1.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn apply<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Shared Gauss–Hermite rule for the standard normal, built once per node count.
pub fn hermite_normal_cached(n: usize) -> Arc<GaussRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().get(&n) {
        return rule.clone();
    }
    let rule = Arc::new(GaussRule::hermite_normal(n));
    cache.lock().entry(n).or_insert(rule).clone()
}

/// Sum of an alternating series given its terms, accelerated by repeated averaging of the
/// partial sums. Returns the accelerated value and the change caused by dropping the last term,
/// which serves as the error estimate.
pub fn euler_sum(terms: &[f64]) -> Estimate {
    fn averaged(partials: &[f64]) -> f64 {
        let mut row = partials.to_vec();
        while row.len() > 1 {
            for k in 0..row.len() - 1 {
                row[k] = 0.5 * (row[k] + row[k + 1]);
            }
            row.pop();
        }
        row[0]
    }
    if terms.is_empty() {
        return Estimate::default();
    }
    let mut partials = Vec::with_capacity(terms.len());
    let mut s = 0.0;
    for t in terms {
        s += t;
        partials.push(s);
    }
    let full = averaged(&partials);
    let error =
        if partials.len() > 1 { (full - averaged(&partials[..partials.len() - 1])).abs() } else { terms[0].abs() };
    Estimate { value: full, error }
}
