use bridgelab::schedule::{mixing, simpson, BetaSpec, BridgeSchedule, Integration};
use proptest::prelude::*;

fn beta_strategy() -> impl Strategy<Value = BetaSpec> {
    prop_oneof![
        (0.01f64..5.0).prop_map(|value| BetaSpec::Constant { value }),
        (0.01f64..5.0).prop_map(|peak| BetaSpec::Triangular { peak }),
    ]
}

proptest! {
    #[test]
    fn mixing_weights_sum_to_one(beta in beta_strategy(), steps in 2usize..200, tau in 0.05f64..=1.0) {
        let s = BridgeSchedule::build(steps, beta, tau).unwrap();
        for n in 0..steps {
            prop_assert_eq!(s.mu[n] + s.mu_bar[n], 1.0);
            prop_assert!((0.0..=1.0).contains(&s.mu[n]));
        }
    }

    #[test]
    fn accumulated_variance_is_monotone(beta in beta_strategy(), steps in 2usize..200, tau in 0.05f64..=1.0) {
        let s = BridgeSchedule::build(steps, beta, tau).unwrap();
        prop_assert_eq!(s.sigma2[0], 0.0);
        for w in s.sigma2.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for w in s.sigma2_bar.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for (n, &a) in s.alpha2.iter().enumerate() {
            prop_assert!(a >= 0.0);
            prop_assert!((s.sigma2[n] + a - s.sigma2[n + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_is_bounded_by_both_sides(a in 0.0f64..10.0, s in 0.0f64..10.0) {
        let c = mixing(a, s);
        prop_assert!(c.var <= a.max(s) + 1e-15);
        prop_assert!(c.var >= 0.0);
    }
}

#[test]
fn quadrature_matches_closed_form_for_constant_beta() {
    for value in [0.1, 1.0, 3.7] {
        for tau in [0.3, 0.6, 1.0] {
            let beta = BetaSpec::Constant { value };
            let exact = BridgeSchedule::build(50, beta, tau).unwrap();
            let quad =
                BridgeSchedule::build_with(50, beta, tau, Integration::Simpson { intervals: 1000 })
                    .unwrap();
            for (a, b) in exact.sigma2.iter().zip(&quad.sigma2) {
                assert!((a - b).abs() < 1e-8);
            }
            for (a, b) in exact.sigma2_bar.iter().zip(&quad.sigma2_bar) {
                assert!((a - b).abs() < 1e-8);
            }
            for n in 0..=50 {
                let t = tau * n as f64 / 50.0;
                assert!((exact.sigma2[n] - value * t).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn quadrature_tracks_closed_form_for_triangular_beta() {
    let beta = BetaSpec::Triangular { peak: 2.0 };
    for (steps, tau) in [(40, 1.0), (37, 0.9), (7, 0.55)] {
        let exact = BridgeSchedule::build(steps, beta, tau).unwrap();
        let quad =
            BridgeSchedule::build_with(steps, beta, tau, Integration::Simpson { intervals: 1000 })
                .unwrap();
        for (a, b) in exact
            .sigma2
            .iter()
            .zip(&quad.sigma2)
            .chain(exact.sigma2_bar.iter().zip(&quad.sigma2_bar))
        {
            assert!((a - b).abs() < 1e-8);
        }
    }
    let exact = BridgeSchedule::build(40, beta, 1.0).unwrap();
    assert!((exact.sigma2[40] - 1.0).abs() < 1e-15);
}

#[test]
fn simpson_is_exact_on_cubics() {
    let v = simpson(|t| t * t * t - 2.0 * t + 1.0, 0.0, 2.0, 2);
    assert!((v - (4.0 - 4.0 + 2.0)).abs() < 1e-14);
}

#[test]
fn truncation_keeps_the_noise_rate() {
    let beta = BetaSpec::default();
    let full = BridgeSchedule::build(100, beta, 1.0).unwrap();
    let cut = BridgeSchedule::build(60, beta, 0.6).unwrap();
    assert!((cut.sigma2[60] - full.sigma2[60]).abs() < 1e-14);
    assert_eq!(cut.times[60], 0.6);
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(BridgeSchedule::build(1, BetaSpec::default(), 1.0).is_err());
    assert!(BridgeSchedule::build(10, BetaSpec::default(), 0.0).is_err());
    assert!(BridgeSchedule::build(10, BetaSpec::default(), 1.5).is_err());
    assert!(BridgeSchedule::build(10, BetaSpec::Constant { value: -1.0 }, 1.0).is_err());
    let s = BridgeSchedule::build(10, BetaSpec::default(), 1.0).unwrap();
    assert!(s.posterior_coefficients(0).is_err());
    assert!(s.posterior_coefficients(11).is_err());
}
