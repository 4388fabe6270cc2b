mod fixture;
mod oracles;

use bridgelab::data::{reference_sample, ClassName};
use bridgelab::models::Denoiser;
use bridgelab::sampler::{
    corrupt, sample_i2sb, sample_rcsb, state_time, GuidanceConfig, SamplerMode,
};
use bridgelab::schedule::{BetaSpec, BridgeSchedule};
use bridgelab::{Error, RegionMask, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> RegionMask {
    let bits = (0..h * w)
        .map(|i| u8::from(i == 0 || rng.gen_bool(0.3)))
        .collect();
    RegionMask::new(h, w, bits).unwrap()
}

fn small_config(seed: u64, s: f64) -> GuidanceConfig {
    GuidanceConfig {
        s,
        steps: 8,
        seed,
        ..GuidanceConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_keeps_pixels_outside_the_region(seed in any::<u64>(), s in 0.0f64..5.0, tau in 0.1f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (score, clf) = oracles::small_models(seed);
        let x = oracles::random_tensor(&mut rng, &[1, 8, 8], 1.0);
        let mask = random_mask(&mut rng, 8, 8);
        let cfg = GuidanceConfig { tau, ..small_config(seed, s) };
        let (out, telemetry) = sample_rcsb(&score, &clf, BetaSpec::default(), &x, &mask, 1, &cfg).unwrap();
        prop_assert_eq!(mask.max_diff_outside(&out, &x).unwrap(), 0.0);
        for (i, (a, b)) in out.data().iter().zip(x.data()).enumerate() {
            if mask.bits()[i] == 0 {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        prop_assert_eq!(telemetry.len(), cfg.steps);
    }

    #[test]
    fn unguided_run_reduces_to_ot_ode_inpainting(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (score, clf) = oracles::small_models(seed);
        let x = oracles::random_tensor(&mut rng, &[1, 8, 8], 1.0);
        let mask = random_mask(&mut rng, 8, 8);
        let cfg = GuidanceConfig { tau: 1.0, project_region: false, ..small_config(seed, 0.0) };
        let beta = BetaSpec::default();
        let (guided, telemetry) = sample_rcsb(&score, &clf, beta, &x, &mask, 0, &cfg).unwrap();

        let sched = BridgeSchedule::build(cfg.steps, beta, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = corrupt(&x, &mask, &mut rng).unwrap();
        let plain = sample_i2sb(&score, &x1, &mask, &sched, SamplerMode::OtOde, &mut rng, None).unwrap();
        prop_assert_eq!(guided, plain);
        prop_assert!(telemetry.raw_grad_norm.iter().all(|&v| v == 0.0));
        prop_assert_eq!(telemetry.registered_norm, None);
    }
}

#[test]
fn ot_ode_ignores_the_noise_source() {
    let (score, _) = oracles::small_models(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = oracles::random_tensor(&mut rng, &[1, 8, 8], 1.0);
    let mask = random_mask(&mut rng, 8, 8);
    let sched = BridgeSchedule::build(12, BetaSpec::default(), 1.0).unwrap();
    let a = sample_i2sb(
        &score,
        &x,
        &mask,
        &sched,
        SamplerMode::OtOde,
        &mut ChaCha8Rng::seed_from_u64(1),
        None,
    )
    .unwrap();
    let b = sample_i2sb(
        &score,
        &x,
        &mask,
        &sched,
        SamplerMode::OtOde,
        &mut ChaCha8Rng::seed_from_u64(2),
        None,
    )
    .unwrap();
    assert_eq!(a, b);
    let c = sample_i2sb(
        &score,
        &x,
        &mask,
        &sched,
        SamplerMode::Stochastic,
        &mut ChaCha8Rng::seed_from_u64(1),
        None,
    )
    .unwrap();
    let d = sample_i2sb(
        &score,
        &x,
        &mask,
        &sched,
        SamplerMode::Stochastic,
        &mut ChaCha8Rng::seed_from_u64(2),
        None,
    )
    .unwrap();
    assert_ne!(c, d);
    let anchored = sample_i2sb(
        &score,
        &x,
        &mask,
        &sched,
        SamplerMode::Stochastic,
        &mut ChaCha8Rng::seed_from_u64(1),
        Some(&x),
    )
    .unwrap();
    assert_eq!(mask.max_diff_outside(&anchored, &x).unwrap(), 0.0);
}

struct Identity;

impl Denoiser for Identity {
    fn predict_x0(&self, x_t: &Tensor, _t: f64, _mask: &RegionMask) -> Result<Tensor> {
        Ok(x_t.clone())
    }
}

proptest! {
    #[test]
    fn perfect_denoiser_of_the_state_is_a_fixed_point(seed in any::<u64>(), steps in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = oracles::random_tensor(&mut rng, &[1, 5, 5], 2.0);
        let mask = RegionMask::full(5, 5);
        let sched = BridgeSchedule::build(steps, BetaSpec::default(), 1.0).unwrap();
        let out = sample_i2sb(&Identity, &x, &mask, &sched, SamplerMode::OtOde, &mut rng, None).unwrap();
        prop_assert!(out.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn state_times_descend_from_tau(steps in 2usize..100, tau in 0.05f64..=1.0) {
        let sched = BridgeSchedule::build(steps, BetaSpec::default(), tau).unwrap();
        prop_assert!((state_time(&sched, steps) - tau).abs() < 1e-12);
        prop_assert_eq!(state_time(&sched, 0), 0.0);
        for n in 1..=steps {
            prop_assert!(state_time(&sched, n) >= state_time(&sched, n - 1));
        }
    }
}

#[test]
fn argument_errors() {
    let (score, clf) = oracles::small_models(8);
    let x = Tensor::zeros(&[1, 8, 8]);
    let cfg = small_config(0, 1.0);
    let beta = BetaSpec::default();
    let empty = RegionMask::empty(8, 8);
    assert!(matches!(
        sample_rcsb(&score, &clf, beta, &x, &empty, 0, &cfg),
        Err(Error::EmptyRegion)
    ));
    let full = RegionMask::full(8, 8);
    assert!(sample_rcsb(&score, &clf, beta, &x, &full, 2, &cfg).is_err());
    assert!(sample_rcsb(&score, &clf, beta, &x, &RegionMask::full(4, 4), 0, &cfg).is_err());
    let bad = GuidanceConfig { tau: 0.0, ..cfg };
    assert!(sample_rcsb(&score, &clf, beta, &x, &full, 0, &bad).is_err());
}

#[test]
fn zero_first_gradient_is_reported() {
    // A flat classifier gives an exactly zero guidance gradient.
    let (score, mut clf) = oracles::small_models(9);
    let zeroed: Vec<_> = clf
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    clf = bridgelab::models::Classifier::from_params(
        clf.arch().clone(),
        zeroed.into_iter().collect(),
    )
    .unwrap();
    let x = Tensor::full(&[1, 8, 8], 0.5);
    let err = sample_rcsb(
        &score,
        &clf,
        BetaSpec::default(),
        &x,
        &RegionMask::full(8, 8),
        0,
        &small_config(0, 1.0),
    );
    assert!(matches!(err, Err(Error::ZeroInitialGradient)), "{err:?}");
}

fn striped(index: usize) -> (Tensor, RegionMask) {
    let s = reference_sample(ClassName::StripedBlob, 0, index, 3);
    let mask = s.object_mask();
    (s.image, mask)
}

#[test]
fn shorter_trajectories_stay_closer_to_the_factual() {
    let models = fixture::models();
    let (mut near, mut far) = (0.0, 0.0);
    for i in 0..6 {
        let (x, mask) = striped(i);
        for (tau, acc) in [(0.4, &mut near), (0.8, &mut far)] {
            let cfg = GuidanceConfig {
                s: 0.0,
                tau,
                steps: 40,
                seed: i as u64,
                ..GuidanceConfig::default()
            };
            let (out, _) = sample_rcsb(
                &models.score,
                &models.classifier,
                models.schedule.beta,
                &x,
                &mask,
                1,
                &cfg,
            )
            .unwrap();
            *acc += mask.mean_abs_diff_inside(&out, &x).unwrap();
        }
    }
    assert!(near < far, "tau 0.4: {near}, tau 0.8: {far}");
}

#[test]
fn guidance_raises_the_target_probability() {
    let models = fixture::models();
    let (mut unguided, mut guided) = (0.0, 0.0);
    for i in 0..6 {
        let (x, mask) = striped(i);
        for (s, acc) in [(0.0, &mut unguided), (3.0, &mut guided)] {
            let cfg = GuidanceConfig {
                s,
                steps: 40,
                seed: i as u64,
                ..GuidanceConfig::default()
            };
            let (_, t) = sample_rcsb(
                &models.score,
                &models.classifier,
                models.schedule.beta,
                &x,
                &mask,
                1,
                &cfg,
            )
            .unwrap();
            *acc += t.prob.last().unwrap();
        }
    }
    assert!(guided > unguided, "guided {guided}, unguided {unguided}");
}

#[test]
fn runs_are_seed_deterministic() {
    let models = fixture::models();
    let (x, mask) = striped(0);
    let cfg = GuidanceConfig {
        steps: 20,
        seed: 5,
        ..GuidanceConfig::default()
    };
    let run = || {
        sample_rcsb(
            &models.score,
            &models.classifier,
            models.schedule.beta,
            &x,
            &mask,
            1,
            &cfg,
        )
        .unwrap()
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert!(ta.registered_norm.unwrap() > 0.0);
    assert!((ta.normalized_grad_norm[0] - 1.0).abs() < 1e-12);
}
