use proptest::prelude::*;
use tweezer_core::fit::*;

fn grid(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn round_trip(model: &dyn FitModel, x: Vec<f64>, truth: &[f64], start: &[f64]) {
    let y = model.eval(&x, truth).unwrap();
    // Relative weights put every model on a comparable residual scale.
    let sigma = y.iter().map(|v| 1e-2 * v.abs().max(1e-3)).collect();
    let f = nls_fit(model, &FitData::new(x, y, sigma).unwrap(), start).unwrap();
    for (p, t) in f.params.iter().zip(truth) {
        assert!((p / t - 1.0).abs() < 1e-6, "{}: {p} vs {t}", model.name());
    }
}

#[test]
fn zero_noise_recovery() {
    round_trip(&SaturatingExponential, grid(20, 0.0, 5e-3), &[0.45, 1.2e-3], &[0.3, 2e-3]);
    round_trip(&ExponentialDecay, grid(20, 0.0, 4.0), &[0.97, 1.3], &[0.8, 2.0]);
    round_trip(&Fringe, grid(24, 0.0, 6.0), &[0.5, 0.8, 0.4], &[0.45, 0.6, 0.1]);
    round_trip(&DampedRabi, grid(61, 0.0, 0.6), &[0.95, 1.3, 10.0], &[0.9, 1.0, 9.8]);
    let duty: Vec<f64> = [0.1, 0.5, 1.0].iter().flat_map(|&d| std::iter::repeat(d).take(20)).collect();
    let x: Vec<f64> = (0..3).flat_map(|_| grid(20, 0.5, 40.0)).collect();
    round_trip(&ReservoirOde { duty }, x, &[0.156, 6.1e-13, 1.6e6 / 6.6e-6], &[0.1, 1e-12, 2e11]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_jacobians_match_differences(a in 0.1f64..1.0, tau in 0.1f64..5.0, ph in -3.0f64..3.0, f in 1.0f64..20.0) {
        let x = grid(15, 0.0, 3.0);
        prop_assert!(jacobian_check(&SaturatingExponential, &x, &[a, tau]).unwrap() < 1e-5);
        prop_assert!(jacobian_check(&ExponentialDecay, &x, &[a, tau]).unwrap() < 1e-5);
        prop_assert!(jacobian_check(&Fringe, &x, &[0.5, a, ph]).unwrap() < 1e-5);
        prop_assert!(jacobian_check(&DampedRabi, &x, &[a, tau, f]).unwrap() < 1e-5);
    }

    #[test]
    fn covariance_is_symmetric_and_positive(a in 0.2f64..1.0, tau in 0.3f64..3.0, seed in 0u64..1000) {
        let mut rng = tweezer_core::rng::RngHandle::new(seed, 0);
        let x = grid(12, 0.0, 4.0);
        let y: Vec<f64> = ExponentialDecay.eval(&x, &[a, tau]).unwrap().into_iter().map(|v| v + 0.01 * rng.normal()).collect();
        let f = nls_fit(&ExponentialDecay, &FitData::new(x, y, vec![0.01; 12]).unwrap(), &[0.5, 1.0]).unwrap();
        prop_assert!(f.std_errors.iter().all(|e| *e > 0.0 && e.is_finite()));
    }
}
