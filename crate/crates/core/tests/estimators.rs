//! Statistical behaviour of the value estimators on small grids.

use roughmerton::asymptotics::ExpansionCoefficients;
use roughmerton::fou::{generate_history, simulate_paths, GridSpec, History, HistoryRule};
use roughmerton::kernel::KernelParams;
use roughmerton::model::{paper_test_model, RiskPreference};
use roughmerton::montecarlo::{estimate_all, EstimatorOptions, ValueTriple};
use roughmerton::quadrature::QuadratureSpec;
use std::sync::Arc;

fn run(eps: f64, g: &GridSpec, history: Arc<History>, n: usize, seed: u64) -> ValueTriple {
    let pref = RiskPreference::new(0.4, -0.5).unwrap();
    let p1 = KernelParams::new(0.1, 1.0, 1.0).unwrap();
    let m = paper_test_model(&p1).unwrap();
    let coeffs = ExpansionCoefficients::compute(&m, &p1, &pref, &QuadratureSpec::default()).unwrap();
    let set = simulate_paths(&KernelParams::new(0.1, 1.0, eps).unwrap(), g, history, pref.rho, n, seed).unwrap();
    estimate_all(&set, &m, &coeffs, &pref, 1.0, 1.0, EstimatorOptions::default()).unwrap()
}

#[test]
fn halving_dt_moves_estimates_within_noise() {
    // The coarse history is the fine one aggregated pairwise, so both grids see the same past.
    let fine = GridSpec::new(1.0, 5e-4, HistoryRule::Explicit(2.0)).unwrap();
    let coarse = GridSpec::new(1.0, 1e-3, HistoryRule::Explicit(2.0)).unwrap();
    let hf = generate_history(&fine, 9);
    let hc =
        History { seed: hf.seed, index: hf.index, increments: hf.increments.chunks(2).map(|c| c[0] + c[1]).collect() };
    let a = run(0.2, &coarse, Arc::new(hc), 20_000, 1);
    let b = run(0.2, &fine, Arc::new(hf), 20_000, 2);
    for (x, y) in [(&a.v_eps, &b.v_eps), (&a.v_pi0, &b.v_pi0), (&a.v_pibar0, &b.v_pibar0)] {
        let se = x.std_err.hypot(y.std_err);
        assert!((x.mean - y.mean).abs() < 3.0 * se, "{}: {} vs {} (se {se})", x.estimator_name, x.mean, y.mean);
    }
}

#[test]
fn losses_are_nonnegative_and_shrink_under_common_noise() {
    let g = GridSpec::new(1.0, 1e-2, HistoryRule::Explicit(5.0)).unwrap();
    let h = Arc::new(generate_history(&g, 4));
    let coarse = run(1.0, &g, h.clone(), 20_000, 3);
    let fast = run(0.02, &g, h, 20_000, 3);
    for t in [&coarse, &fast] {
        let (l, se) = t.loss_pi0();
        assert!(l > -3.0 * se, "{l} ± {se}");
        let (lb, seb) = t.loss_pibar0();
        assert!(lb > 3.0 * seb, "{lb} ± {seb}");
    }
    assert!(fast.loss_pi0().0 < coarse.loss_pi0().0 + 3.0 * coarse.loss_pi0().1);
}
