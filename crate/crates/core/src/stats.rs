//! Compensated summation and small sample-statistics helpers.
//!
//! All reductions run sequentially over slices in index order, so results do not depend on how
//! the slices were produced (e.g. by a parallel map).

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(xs: &[f64]) -> f64 {
    let mut s = CompensatedSum::new();
    for &x in xs {
        s.add(x);
    }
    s.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let mut s = CompensatedSum::new();
    for &x in xs {
        s.add((x - m) * (x - m));
    }
    s.value() / (n - 1) as f64
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut s = CompensatedSum::new();
    for (&x, &y) in xs.iter().zip(ys) {
        s.add((x - mx) * (y - my));
    }
    s.value() / (n - 1) as f64
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    covariance(xs, ys) / (variance(xs) * variance(ys)).sqrt()
}

/// Least-squares slope of `y` on `x` with its standard error.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = CompensatedSum::new();
    let mut sxy = CompensatedSum::new();
    for (&a, &b) in x.iter().zip(y) {
        sxx.add((a - mx) * (a - mx));
        sxy.add((a - mx) * (b - my));
    }
    let slope = sxy.value() / sxx.value();
    if n <= 2 {
        return (slope, f64::NAN);
    }
    let mut rss = CompensatedSum::new();
    for (&a, &b) in x.iter().zip(y) {
        let r = b - my - slope * (a - mx);
        rss.add(r * r);
    }
    (slope, (rss.value() / ((n - 2) as f64 * sxx.value())).sqrt())
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
