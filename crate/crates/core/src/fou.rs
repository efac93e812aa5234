//! Discretized simulation of the stationary fast factor
//! `Y_t = ∫_{-∞}^t K^ε(t-s) dW^Y_s` together with the asset noise `W = ρW^Y + √(1-ρ²)W^⊥`.
//!
//! On a grid `t_k = k·dt` the factor is the discrete moving average
//!
//! ```text
//! y_k = Σ_{j ≥ 0} (K̂_j / dt) · ΔW^Y_{k-1-j},     K̂_j = ∫_{j dt}^{(j+1) dt} K^ε(u) du,
//! ```
//!
//! where `ΔW^Y_i` is the increment over `[t_i, t_{i+1}]` and the sum runs back to `-M`.
//! Cell integrals are exact differences of the kernel antiderivative, so the singular first
//! cell needs no special treatment. The history part of the sum is shared by every path of a
//! [`FouPathSet`] and is convolved once; the forward part is convolved per path.
//!
//! Paths are generated lazily from counter-based ChaCha streams keyed by the path index, so a
//! path is identical whichever thread builds it and whatever ε the set was built for.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::kernel::{Kernel, KernelParams};
use crate::quadrature::QuadratureSpec;

/// Longest forward grid convolved directly; longer ones go through the FFT.
pub const DIRECT_CONVOLUTION_MAX: usize = 128;

/// Stream domains; every consumer of randomness draws from its own.
pub(crate) const DOMAIN_FORWARD: u64 = 1;
pub(crate) const DOMAIN_HISTORY: u64 = 2;
pub(crate) const DOMAIN_NESTED: u64 = 3;

pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub(crate) fn fill_normals(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryRule {
    /// History length given in time units.
    Explicit(f64),
    /// `M = (T/dt)^{1/2}`, read as a time length.
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub dt: f64,
    pub history_length: f64,
    pub n_steps: usize,
    pub n_history: usize,
    /// Values before rounding to whole steps.
    pub requested_dt: f64,
    pub requested_history_length: f64,
}

impl GridSpec {
    /// Rounds `T/dt` and `M/dt` to integers; `dt` is then adjusted to `T/n_steps`.
    pub fn new(horizon: f64, dt: f64, rule: HistoryRule) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid("horizon", format!("{horizon} must be positive")));
        }
        if !(dt > 0.0) || dt > horizon {
            return Err(invalid("dt", format!("{dt} must lie in (0, T]")));
        }
        let n_steps = ((horizon / dt).round() as usize).max(1);
        let used_dt = horizon / n_steps as f64;
        let requested_history_length = match rule {
            HistoryRule::Explicit(m) => {
                if !(m >= 0.0) || !m.is_finite() {
                    return Err(invalid("history_length", format!("{m} must be non-negative")));
                }
                m
            }
            HistoryRule::Sqrt => (horizon / dt).sqrt(),
        };
        let n_history = (requested_history_length / used_dt).round() as usize;
        Ok(Self {
            horizon,
            dt: used_dt,
            history_length: n_history as f64 * used_dt,
            n_steps,
            n_history,
            requested_dt: dt,
            requested_history_length,
        })
    }

    pub fn n_total(&self) -> usize {
        self.n_steps + self.n_history
    }
}

/// Cell-integrated kernel weights `K̂_j`, `j = 0 .. n_history + n_steps - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionWeights {
    pub params: KernelParams,
    pub dt: f64,
    pub cells: Vec<f64>,
    /// `Σ_j (K̂_j/dt)² dt` over all cells: the population variance of the last grid value.
    pub discrete_variance: f64,
    /// `∫_M^∞ (K^ε)²`: stationary variance lost by truncating the history at `-M`.
    pub truncated_tail_variance: f64,
}

impl ConvolutionWeights {
    /// `K̂_j / dt`.
    pub fn density(&self, j: usize) -> f64 {
        self.cells[j] / self.dt
    }

    pub fn densities(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c / self.dt).collect()
    }

    /// Population variance of `y_k`: `Σ_{j < n_history + k} (K̂_j/dt)² dt`.
    pub fn variance_at(&self, n_history: usize, k: usize) -> f64 {
        let n = (n_history + k).min(self.cells.len());
        crate::stats::sum(&self.cells[..n].iter().map(|c| c * c / self.dt).collect::<Vec<_>>())
    }
}

pub fn build_convolution_weights(p: &KernelParams, g: &GridSpec) -> Result<ConvolutionWeights> {
    let kernel = Kernel::new(*p)?;
    let n = g.n_total();
    let dt = g.dt;
    let mut cells = Vec::with_capacity(n);
    let mut prev = 0.0;
    for j in 0..n {
        let next = kernel.antiderivative((j + 1) as f64 * dt / p.eps);
        cells.push(p.eps.sqrt() * (next - prev));
        prev = next;
    }
    let squares: Vec<f64> = cells.iter().map(|c| c * c / dt).collect();
    let discrete_variance = crate::stats::sum(&squares);
    let truncated_tail_variance = if g.history_length > 0.0 {
        let spec = QuadratureSpec::new(1e-14, 1e-8, 2000)?;
        kernel.l2_norm_sq_from(g.history_length / p.eps, &spec)?.value
    } else {
        f64::NAN
    };
    Ok(ConvolutionWeights { params: *p, dt, cells, discrete_variance, truncated_tail_variance })
}

/// Conditioning increments of `W^Y` on `[-M, 0]`, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub seed: u64,
    pub index: u64,
    pub increments: Vec<f64>,
}

impl History {
    pub fn id(&self) -> String {
        format!("{}:{}", self.seed, self.index)
    }
}

pub fn generate_history(g: &GridSpec, seed: u64) -> History {
    generate_history_indexed(g, seed, 0)
}

/// History number `index` of the family keyed by `seed`.
pub fn generate_history_indexed(g: &GridSpec, seed: u64, index: u64) -> History {
    let mut increments = vec![0.0; g.n_history];
    let mut rng = stream_rng(seed, DOMAIN_HISTORY, index);
    fill_normals(&mut rng, g.dt.sqrt(), &mut increments);
    History { seed, index, increments }
}

struct FftPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex<f64>>,
}

/// Causal convolution with a fixed weight sequence:
/// `out[k] = Σ_{j=0}^{k-1} w[j] x[k-1-j]` for `k < n_out`.
pub struct CausalConvolver {
    w: Vec<f64>,
    n_out: usize,
    fft: Option<FftPlan>,
}

impl std::fmt::Debug for CausalConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CausalConvolver")
            .field("n_out", &self.n_out)
            .field("fft_len", &self.fft.as_ref().map(|p| p.len))
            .finish()
    }
}

impl CausalConvolver {
    pub fn new(w: &[f64], n_out: usize) -> Self {
        Self::with_threshold(w, n_out, DIRECT_CONVOLUTION_MAX)
    }

    pub fn with_threshold(w: &[f64], n_out: usize, direct_max: usize) -> Self {
        let w: Vec<f64> = w[..n_out.saturating_sub(1).min(w.len())].to_vec();
        let fft = if n_out > direct_max {
            let len = (2 * n_out).next_power_of_two();
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            let mut spectrum = vec![Complex::new(0.0, 0.0); len];
            for (s, &v) in spectrum.iter_mut().zip(&w) {
                s.re = v / len as f64;
            }
            forward.process(&mut spectrum);
            Some(FftPlan { len, forward, inverse, spectrum })
        } else {
            None
        };
        Self { w, n_out, fft }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_out;
        assert!(out.len() >= n && x.len() + 1 >= n);
        out[0] = 0.0;
        match &self.fft {
            None => {
                for k in 1..n {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += self.w[j] * x[k - 1 - j];
                    }
                    out[k] = acc;
                }
            }
            Some(plan) => {
                let mut buf = vec![Complex::new(0.0, 0.0); plan.len];
                for (b, &v) in buf.iter_mut().zip(&x[..n - 1]) {
                    b.re = v;
                }
                plan.forward.process(&mut buf);
                for (b, s) in buf.iter_mut().zip(&plan.spectrum) {
                    *b *= s;
                }
                plan.inverse.process(&mut buf);
                for k in 1..n {
                    out[k] = buf[k - 1].re;
                }
            }
        }
    }
}

/// Full linear convolution `(a * b)_m = Σ_i a_i b_{m-i}`, `m < a.len() + b.len() - 1`.
pub fn linear_convolution(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 {
        let mut out = vec![0.0; n];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let len = n.next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);
    let mut fa = vec![Complex::new(0.0, 0.0); len];
    let mut fb = vec![Complex::new(0.0, 0.0); len];
    for (s, &v) in fa.iter_mut().zip(a) {
        s.re = v;
    }
    for (s, &v) in fb.iter_mut().zip(b) {
        s.re = v;
    }
    forward.process(&mut fa);
    forward.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y / len as f64;
    }
    inverse.process(&mut fa);
    fa[..n].iter().map(|c| c.re).collect()
}

/// Contribution of the history to `y_k`, `k = 0 ..= n_steps`.
pub fn history_contribution(w: &ConvolutionWeights, g: &GridSpec, history: &History) -> Vec<f64> {
    let n_hist = history.increments.len();
    if n_hist == 0 {
        return vec![0.0; g.n_steps + 1];
    }
    let dens = w.densities();
    let full = linear_convolution(&dens[..(n_hist + g.n_steps).min(dens.len())], &history.increments);
    (0..=g.n_steps).map(|k| full[k + n_hist - 1]).collect()
}

/// One simulated path on `[0, T]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FouPath {
    /// `ΔW^Y_k`, `k < n_steps`.
    pub dwy: Vec<f64>,
    /// `ΔW_k`, `k < n_steps`.
    pub dw: Vec<f64>,
    /// `y_k`, `k = 0 ..= n_steps`.
    pub y: Vec<f64>,
}

/// A family of paths sharing one history; each path is rebuilt on demand from its index.
#[derive(Debug)]
pub struct FouPathSet {
    pub params: KernelParams,
    pub grid: GridSpec,
    pub rho: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub history: Arc<History>,
    pub weights: Arc<ConvolutionWeights>,
    history_part: Vec<f64>,
    convolver: CausalConvolver,
}

pub fn simulate_paths(
    p: &KernelParams,
    g: &GridSpec,
    history: Arc<History>,
    rho: f64,
    n_paths: usize,
    seed: u64,
) -> Result<FouPathSet> {
    let weights = Arc::new(build_convolution_weights(p, g)?);
    FouPathSet::from_weights(weights, g, history, rho, n_paths, seed)
}

impl FouPathSet {
    pub fn from_weights(
        weights: Arc<ConvolutionWeights>,
        g: &GridSpec,
        history: Arc<History>,
        rho: f64,
        n_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(invalid("rho", format!("{rho} not in (-1, 1)")));
        }
        if history.increments.len() != g.n_history {
            return Err(invalid(
                "history",
                format!("{} increments, grid expects {}", history.increments.len(), g.n_history),
            ));
        }
        if weights.cells.len() != g.n_total() || (weights.dt - g.dt).abs() > 1e-15 * g.dt {
            return Err(invalid("weights", "built for a different grid"));
        }
        let history_part = history_contribution(&weights, g, &history);
        let dens = weights.densities();
        let convolver = CausalConvolver::new(&dens[..g.n_steps], g.n_steps + 1);
        Ok(Self { params: weights.params, grid: *g, rho, seed, n_paths, history, weights, history_part, convolver })
    }

    /// Same seed, history and forward noise at a different ε (common random numbers).
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        let p = self.params.with_eps(eps)?;
        simulate_paths(&p, &self.grid, self.history.clone(), self.rho, self.n_paths, self.seed)
    }

    pub fn history_id(&self) -> String {
        self.history.id()
    }

    pub fn history_part(&self) -> &[f64] {
        &self.history_part
    }

    pub fn path(&self, index: usize) -> FouPath {
        let mut out = FouPath::default();
        self.path_into(index, &mut out);
        out
    }

    /// Forward noise of path `index`; independent of ε and of the history.
    pub fn noise_into(&self, index: usize, dwy: &mut Vec<f64>, dw: &mut Vec<f64>) {
        let n = self.grid.n_steps;
        dwy.resize(n, 0.0);
        dw.resize(n, 0.0);
        let mut rng = stream_rng(self.seed, DOMAIN_FORWARD, index as u64);
        let sd = self.grid.dt.sqrt();
        fill_normals(&mut rng, sd, dwy);
        fill_normals(&mut rng, sd, dw);
        let c = (1.0 - self.rho * self.rho).sqrt();
        for (w, &wy) in dw.iter_mut().zip(dwy.iter()) {
            *w = self.rho * wy + c * *w;
        }
    }

    pub fn path_into(&self, index: usize, out: &mut FouPath) {
        self.noise_into(index, &mut out.dwy, &mut out.dw);
        self.factor_from_noise(&out.dwy, &mut out.y);
    }

    /// `y_k`, `k = 0 ..= n_steps`, for arbitrary forward increments `dwy` on this history.
    pub fn factor_from_noise(&self, dwy: &[f64], y: &mut Vec<f64>) {
        assert_eq!(dwy.len(), self.grid.n_steps, "forward noise length");
        y.resize(self.grid.n_steps + 1, 0.0);
        self.convolver.apply(dwy, y);
        for (v, h) in y.iter_mut().zip(&self.history_part) {
            *v += h;
        }
    }

    /// Same weights, grid and seed on another history.
    pub fn with_history(&self, history: Arc<History>) -> Result<Self> {
        Self::from_weights(self.weights.clone(), &self.grid, history, self.rho, self.n_paths, self.seed)
    }

    /// Writes the set in the little-endian dump layout (see [`read_dump`]).
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Dump(e.to_string());
        w.write_all(DUMP_MAGIC).map_err(io)?;
        for v in [
            self.params.hurst,
            self.params.rate,
            self.params.eps,
            self.grid.horizon,
            self.grid.dt,
            self.grid.history_length,
            self.rho,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [
            self.grid.n_steps as u64,
            self.grid.n_history as u64,
            self.seed,
            self.n_paths as u64,
            self.history.seed,
            self.history.index,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        write_f64s(&mut w, &self.history.increments)?;
        let mut path = FouPath::default();
        for i in 0..self.n_paths {
            self.path_into(i, &mut path);
            write_f64s(&mut w, &path.dwy)?;
            write_f64s(&mut w, &path.dw)?;
            write_f64s(&mut w, &path.y)?;
        }
        Ok(())
    }
}

const DUMP_MAGIC: &[u8; 8] = b"RMFOU\0\x01\0";

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * xs.len());
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::Dump(e.to_string()))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf).map_err(|e| Error::Dump(e.to_string()))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Dump(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

/// Contents of a path dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub params: KernelParams,
    pub grid: GridSpec,
    pub rho: f64,
    pub seed: u64,
    pub history: History,
    pub paths: Vec<FouPath>,
}

/// Reads a dump written by [`FouPathSet::write_dump`].
///
/// Layout: 8-byte magic; f64 `H, a, ε, T, dt, M, ρ`; u64 `n_steps, n_history, seed, n_paths,
/// history seed, history index`; `n_history` history increments; then per path `dW^Y`
/// (`n_steps`), `dW` (`n_steps`), `y` (`n_steps + 1`). All values little-endian.
pub fn read_dump<R: Read>(mut r: R) -> Result<PathDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Dump(e.to_string()))?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let h = read_f64s(&mut r, 7)?;
    let n_steps = read_u64(&mut r)? as usize;
    let n_history = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let n_paths = read_u64(&mut r)? as usize;
    let history_seed = read_u64(&mut r)?;
    let history_index = read_u64(&mut r)?;
    let params = KernelParams::new(h[0], h[1], h[2])?;
    let grid = GridSpec {
        horizon: h[3],
        dt: h[4],
        history_length: h[5],
        n_steps,
        n_history,
        requested_dt: h[4],
        requested_history_length: h[5],
    };
    let history = History { seed: history_seed, index: history_index, increments: read_f64s(&mut r, n_history)? };
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        paths.push(FouPath {
            dwy: read_f64s(&mut r, n_steps)?,
            dw: read_f64s(&mut r, n_steps)?,
            y: read_f64s(&mut r, n_steps + 1)?,
        });
    }
    Ok(PathDump { params, grid, rho: h[6], seed, history, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{covariance_cy, sigma_ou_sq};
    use crate::stats;
    use approx::assert_relative_eq;

    fn params(h: f64, eps: f64) -> KernelParams {
        KernelParams::new(h, 1.0, eps).unwrap()
    }

    #[test]
    fn grid_rounding() {
        let g = GridSpec::new(1.0, 1e-3, HistoryRule::Sqrt).unwrap();
        assert_eq!(g.n_steps, 1000);
        assert_eq!(g.n_history, 31623);
        let g = GridSpec::new(1.0, 0.3, HistoryRule::Explicit(1.0)).unwrap();
        assert_eq!(g.n_steps, 3);
        assert_relative_eq!(g.dt, 1.0 / 3.0);
        assert_eq!(g.n_history, 3);
        assert!(GridSpec::new(1.0, 2.0, HistoryRule::Sqrt).is_err());
        assert!(GridSpec::new(1.0, 0.1, HistoryRule::Explicit(-1.0)).is_err());
    }

    #[test]
    fn markov_first_weight() {
        let g = GridSpec::new(1.0, 0.1, HistoryRule::Explicit(0.0)).unwrap();
        let w = build_convolution_weights(&params(0.5, 1.0), &g).unwrap();
        assert_relative_eq!(w.cells[0], 1.0 - (-0.1f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(w.cells[0], 0.0951626, epsilon = 1e-7);
        assert!(w.cells.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn rough_weights_sum_to_kernel_integral() {
        let p = params(0.1, 0.1);
        let g = GridSpec::new(1.0, 1e-3, HistoryRule::Explicit(2.0)).unwrap();
        let w = build_convolution_weights(&p, &g).unwrap();
        let total = stats::sum(&w.cells);
        let k = Kernel::new(p).unwrap();
        let spec = QuadratureSpec::default();
        let oracle = crate::quadrature::integrate_with_breaks(
            |u: f64| if u <= 0.0 { 0.0 } else { k.rescaled(u).unwrap() },
            &[0.0, 1e-6, 1e-3, 0.1, 1.0, 3.0],
            &spec,
            "kernel integral",
        )
        .unwrap();
        assert!((total - oracle.value).abs() < 1e-8, "{total} vs {}", oracle.value);
        assert!(total.abs() <= 0.1f64.sqrt());
        // Leading cells are positive (the kernel is positive below its first zero).
        assert!(w.cells[..100].iter().all(|&c| c > 0.0));
        assert!(w.cells[200] < 0.0);
    }

    #[test]
    fn history_determinism_and_size() {
        let g = GridSpec::new(1.0, 1e-4, HistoryRule::Explicit(100.0)).unwrap();
        let a = generate_history(&g, 7);
        let b = generate_history(&g, 7);
        assert_eq!(a, b);
        assert_eq!(a.increments.len(), 1_000_000);
        let n = a.increments.len() as f64;
        let v = a.increments.iter().map(|x| x * x).sum::<f64>() / n;
        // Var of the sample second moment of N(0, dt): 2dt²/n.
        assert!((v - g.dt).abs() < 3.0 * (2.0 / n).sqrt() * g.dt);
        let g0 = GridSpec::new(1.0, 1e-2, HistoryRule::Explicit(0.0)).unwrap();
        assert!(generate_history(&g0, 1).increments.is_empty());
    }

    #[test]
    fn convolvers_agree() {
        let w: Vec<f64> = (0..500).map(|j| 1.0 / (1.0 + j as f64).sqrt()).collect();
        let x: Vec<f64> = (0..499).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
        let mut a = vec![0.0; 500];
        let mut b = vec![0.0; 500];
        CausalConvolver::with_threshold(&w, 500, 10_000).apply(&x, &mut a);
        CausalConvolver::with_threshold(&w, 500, 0).apply(&x, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let full = linear_convolution(&w, &x);
        for k in 1..500 {
            assert!((full[k - 1] - a[k]).abs() < 1e-12);
        }
    }

    fn small_set(h: f64, eps: f64, rho: f64, n: usize) -> FouPathSet {
        let p = params(h, eps);
        let g = GridSpec::new(1.0, 1e-2, HistoryRule::Explicit(2.0)).unwrap();
        let hist = Arc::new(generate_history(&g, 3));
        simulate_paths(&p, &g, hist, rho, n, 11).unwrap()
    }

    #[test]
    fn paths_are_reproducible_and_adapted() {
        let set = small_set(0.1, 0.1, -0.5, 4);
        let a = set.path(2);
        assert_eq!(a, set.path(2));
        // Truncating forward noise after step k leaves y on [0, t_k] unchanged.
        let k = 40;
        let dens = set.weights.densities();
        for j in 0..=k {
            let y =
                set.history_part()[j] + dens[..j].iter().zip(a.dwy[..j].iter().rev()).map(|(w, x)| w * x).sum::<f64>();
            assert!((y - a.y[j]).abs() < 1e-12);
        }
        // Forward noise does not depend on ε.
        let b = set.with_eps(0.5).unwrap().path(2);
        assert_eq!(a.dwy, b.dwy);
        assert_eq!(a.dw, b.dw);
    }

    #[test]
    fn step_correlation_matches_rho() {
        for &rho in &[0.0, -0.5] {
            let set = small_set(0.1, 0.1, rho, 200);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for i in 0..set.n_paths {
                let p = set.path(i);
                xs.extend(p.dwy);
                ys.extend(p.dw);
            }
            let n = xs.len() as f64;
            let r = stats::correlation(&xs, &ys);
            let se = (1.0 - rho * rho) / n.sqrt();
            assert!((r - rho).abs() < 3.0 * se.max(1.0 / n.sqrt()), "{r}");
        }
    }

    #[test]
    fn conditional_variance_matches_discrete_weights() {
        // With the history fixed, Var(y_N) across paths is the forward part of the weight sum.
        let set = small_set(0.1, 0.1, 0.0, 20_000);
        let n = set.grid.n_steps;
        let ys: Vec<f64> = (0..set.n_paths).map(|i| set.path(i).y[n]).collect();
        let forward = set.weights.variance_at(0, n);
        let v = stats::variance(&ys);
        let se = forward * (2.0 / set.n_paths as f64).sqrt();
        assert!((v - forward).abs() < 3.0 * se, "{v} vs {forward}");
        let m = stats::mean(&ys);
        assert!((m - set.history_part()[n]).abs() < 3.0 * (forward / set.n_paths as f64).sqrt());
    }

    /// Independent histories per sample give the stationary law of the discretized factor.
    fn stationary_samples(p: &KernelParams, g: &GridSpec, n: usize, lags: &[usize]) -> Vec<Vec<f64>> {
        let w = build_convolution_weights(p, g).unwrap();
        let dens = w.densities();
        let total = g.n_total();
        (0..n)
            .map(|i| {
                let mut rng = stream_rng(99, DOMAIN_NESTED, i as u64);
                let mut x = vec![0.0; total];
                fill_normals(&mut rng, g.dt.sqrt(), &mut x);
                lags.iter()
                    .map(|&k| {
                        // y at forward step k; x[total - 1 - j] is the increment j cells before T.
                        let end = g.n_history + k;
                        (0..end).map(|j| dens[j] * x[end - 1 - j]).sum()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn stationary_variance_and_lag_correlation() {
        let p = params(0.3, 0.1);
        let g = GridSpec::new(1.0, 1e-2, HistoryRule::Explicit(3.0)).unwrap();
        let w = build_convolution_weights(&p, &g).unwrap();
        let lag = 50; // s = 0.5 = 5ε
        let samples = stationary_samples(&p, &g, 20_000, &[0, lag]);
        let y0: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        let y1: Vec<f64> = samples.iter().map(|s| s[1]).collect();
        let n = y0.len() as f64;
        let pop = w.variance_at(g.n_history, 0);
        let v = stats::variance(&y0);
        assert!((v - pop).abs() < 3.0 * pop * (2.0 / n).sqrt(), "{v} vs {pop}");
        // The discrete variance sits below σ²_ou by the discretization and truncation bias.
        let bias = sigma_ou_sq(&p) - pop;
        assert!(bias > 0.0 && bias < 0.15 * sigma_ou_sq(&p), "bias {bias}");
        let r = stats::correlation(&y0, &y1);
        // Population correlation of the discretized factor, and its distance to C_Y.
        let d = &w.cells;
        let total = g.n_history;
        let cross: f64 = (0..total).map(|j| d[j + lag] * d[j] / g.dt).sum();
        let disc = cross / (w.variance_at(g.n_history, lag) * pop).sqrt();
        let c = covariance_cy(0.5 / 0.1, &p, &QuadratureSpec::default()).unwrap();
        let se = (1.0 - c * c) / n.sqrt();
        assert!((r - disc).abs() < 3.0 * se, "{r} vs {disc}");
        assert!((r - c).abs() < 3.0 * se + (disc - c).abs(), "{r} vs {c}");
        assert!((disc - c).abs() < 0.02, "discretization bias {disc} vs {c}");
    }

    #[test]
    fn dump_round_trip() {
        let set = small_set(0.1, 0.5, -0.3, 3);
        let mut buf = Vec::new();
        set.write_dump(&mut buf).unwrap();
        let d = read_dump(&buf[..]).unwrap();
        assert_eq!(d.params, set.params);
        assert_eq!(d.grid.n_steps, set.grid.n_steps);
        assert_eq!(d.history.increments, set.history.increments);
        assert_eq!(d.paths[1], set.path(1));
        assert!(read_dump(&buf[..20]).is_err());
        assert!(read_dump(&b"garbage!"[..]).is_err());
    }
}
