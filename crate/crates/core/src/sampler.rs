//! Bridge sampling: unguided inpainting and classifier-guided counterfactual
//! generation restricted to a region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, Denoiser, GuidedPair, ScoreNetwork};
use crate::numerics::{adam_step_in_place, AdamConfig, AdamState, Tensor};
use crate::regions::RegionMask;
use crate::schedule::{BetaSpec, BridgeSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance scale `s`.
    pub s: f64,
    /// Trajectory truncation `τ`.
    pub tau: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    pub adam: AdamConfig,
    pub adaptive_norm: bool,
    pub seed: u64,
    pub project_region: bool,
    /// Variance scale of the bridge posterior used for the entry state.
    pub posterior_alpha: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s: 3.0,
            tau: 0.6,
            steps: 100,
            adam: AdamConfig::default(),
            adaptive_norm: true,
            seed: 0,
            project_region: true,
            posterior_alpha: 0.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::invalid(format!(
                "guidance scale must be >= 0, got {}",
                self.s
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if self.steps < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 steps, got {}",
                self.steps
            )));
        }
        if !(self.posterior_alpha >= 0.0 && self.posterior_alpha.is_finite()) {
            return Err(Error::invalid("posterior alpha must be >= 0"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.beta1 >= 0.0 && self.adam.beta1 < 1.0)
            || !(self.adam.beta2 >= 0.0 && self.adam.beta2 < 1.0 && self.adam.eps > 0.0)
        {
            return Err(Error::invalid("adam parameters out of range"));
        }
        Ok(())
    }
}

/// One row per sampler step, ordered from `n = N` down to `n = 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTelemetry {
    pub t: Vec<f64>,
    /// `f(y | x̂₀)` at each step.
    pub prob: Vec<f64>,
    pub raw_grad_norm: Vec<f64>,
    pub stabilized_grad_norm: Vec<f64>,
    /// Norm of the step actually added to the state, divided by `s`.
    pub normalized_grad_norm: Vec<f64>,
    /// Norm registered at the first step; `None` when guidance is off.
    pub registered_norm: Option<f64>,
    /// Whether the factual was already classified as the target.
    pub already_target: bool,
}

impl RunTelemetry {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Stochastic,
    OtOde,
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// `x₁ = (1 - R) ⊙ x* + R ⊙ z` with `z` standard normal.
pub fn corrupt(x_star: &Tensor, mask: &RegionMask, rng: &mut impl Rng) -> Result<Tensor> {
    mask.check_image(x_star)?;
    let z = standard_normal(x_star.shape(), rng);
    mask.blend(x_star, &z)
}

/// A draw from `N(x₀ + t(x₁ - x₀), α t(1 - t) I)`. At `t = 0` and `t = 1`
/// the endpoints are returned exactly.
pub fn sample_posterior_q(
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    x0.expect_same_shape(x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let mean = x0.zip_map(x1, |a, b| a + t * (b - a))?;
    let var = alpha * t * (1.0 - t);
    if var == 0.0 {
        return Ok(mean);
    }
    let sd = var.sqrt();
    let mut out = mean;
    for v in out.data_mut() {
        *v += sd * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// Entry state of a truncated trajectory: `x_N ~ q(x_N | x*, x₁)` at `t = τ`.
pub fn truncate_entry_state(
    x_star: &Tensor,
    x1: &Tensor,
    sched: &BridgeSchedule,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if sched.tau <= 0.0 {
        return Err(Error::invalid("tau must be positive"));
    }
    sample_posterior_q(x_star, x1, sched.tau, alpha, rng)
}

/// Position of the state at step `n` on the straight path from `x₀` to `x₁`.
///
/// The entry state sits at `τ`; each posterior step shrinks the distance to
/// the clean estimate by `σ²ₙ₋₁ / σ²ₙ`, so step `n` sits at `τ σ²ₙ / σ²_N`.
/// This is the time the network was trained with.
pub fn state_time(sched: &BridgeSchedule, n: usize) -> f64 {
    let top = sched.sigma2[sched.steps];
    if top > 0.0 {
        (sched.tau * sched.sigma2[n] / top).clamp(0.0, 1.0)
    } else {
        sched.times[n]
    }
}

fn project(x: &mut Tensor, anchor: &Tensor, mask: &RegionMask) {
    let hw = mask.height() * mask.width();
    let bits = mask.bits();
    for (i, (v, a)) in x.data_mut().iter_mut().zip(anchor.data()).enumerate() {
        if bits[i % hw] == 0 {
            *v = *a;
        }
    }
}

fn check_state(x: &Tensor, step: usize, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::SamplerDiverged {
            step,
            what: what.to_string(),
        })
    }
}

/// Unguided bridge generation from the state at the schedule's last time
/// (`x₁` for an untruncated schedule) down to `x₀`.
///
/// With `anchor`, pixels outside `mask` are reset to the anchor after every step.
pub fn sample_i2sb(
    net: &dyn Denoiser,
    x_start: &Tensor,
    mask: &RegionMask,
    sched: &BridgeSchedule,
    mode: SamplerMode,
    rng: &mut impl Rng,
    anchor: Option<&Tensor>,
) -> Result<Tensor> {
    mask.check_image(x_start)?;
    if let Some(a) = anchor {
        x_start.expect_same_shape(a)?;
    }
    let mut x = x_start.clone();
    for n in (1..=sched.steps).rev() {
        let x0_hat = net.predict_x0(&x, state_time(sched, n), mask)?;
        let c = sched.posterior_coefficients(n)?;
        let mut next = x0_hat.zip_map(&x, |a, b| c.mu * a + c.mu_bar * b)?;
        if mode == SamplerMode::Stochastic && c.var > 0.0 {
            let sd = c.var.sqrt();
            for v in next.data_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(a) = anchor {
            project(&mut next, a, mask);
        }
        check_state(&next, n, "bridge state")?;
        x = next;
    }
    Ok(x)
}

/// Classifier-guided counterfactual inside `mask`.
///
/// Starts from the truncated entry state, and at each step adds the
/// ADAM-stabilized gradient of `log f(y | x̂₀(xₙ))`, scaled by `s` and divided
/// by the norm registered at the first step, before the posterior update.
pub fn sample_rcsb(
    score: &ScoreNetwork,
    classifier: &Classifier,
    beta: BetaSpec,
    x_star: &Tensor,
    mask: &RegionMask,
    target: usize,
    cfg: &GuidanceConfig,
) -> Result<(Tensor, RunTelemetry)> {
    cfg.validate()?;
    mask.check_image(x_star)?;
    if mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let pair = GuidedPair::new(score, classifier)?;
    if target >= classifier.arch().classes {
        return Err(Error::invalid(format!(
            "target class {target} outside 0..{}",
            classifier.arch().classes
        )));
    }
    let sched = BridgeSchedule::build(cfg.steps, beta, cfg.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut telemetry = RunTelemetry::default();
    let factual = classifier.classify(x_star)?;
    telemetry.already_target = crate::numerics::argmax(&factual) == target;
    if telemetry.already_target {
        log::warn!("factual is already classified as target class {target}");
    }

    let x1 = corrupt(x_star, mask, &mut rng)?;
    let mut x = truncate_entry_state(x_star, &x1, &sched, cfg.posterior_alpha, &mut rng)?;
    let mut adam = AdamState::zeros(x.numel());
    let mut registered: Option<f64> = None;

    for n in (1..=sched.steps).rev() {
        let t = state_time(&sched, n);
        let c = sched.posterior_coefficients(n)?;
        let (x0_hat, prob, guided) = if cfg.s == 0.0 {
            let x0_hat = pair.denoise(&x, t, mask)?;
            let prob = classifier.classify(&x0_hat)?[target].exp();
            telemetry.raw_grad_norm.push(0.0);
            telemetry.stabilized_grad_norm.push(0.0);
            telemetry.normalized_grad_norm.push(0.0);
            (x0_hat, prob, x.clone())
        } else {
            let eval = pair
                .guided_gradient(&x, t, mask, target)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::SamplerDiverged { step: n, what },
                    other => other,
                })?;
            let stabilized = adam_step_in_place(&cfg.adam, &mut adam, &eval.gradient)?;
            let norm = stabilized.norm_l2();
            let divisor = if cfg.adaptive_norm {
                *registered.get_or_insert(norm)
            } else {
                1.0
            };
            if registered == Some(0.0) {
                return Err(Error::ZeroInitialGradient);
            }
            telemetry.raw_grad_norm.push(eval.gradient.norm_l2());
            telemetry.stabilized_grad_norm.push(norm);
            telemetry.normalized_grad_norm.push(norm / divisor);
            let step = cfg.s / divisor;
            let guided = x.zip_map(&stabilized, |a, g| a + step * g)?;
            (eval.x0_hat, eval.log_prob.exp(), guided)
        };
        telemetry.t.push(t);
        telemetry.prob.push(prob);

        let mut next = x0_hat.zip_map(&guided, |a, b| c.mu * a + c.mu_bar * b)?;
        if cfg.project_region {
            project(&mut next, x_star, mask);
        }
        check_state(&next, n, "bridge state")?;
        x = next;
    }
    if cfg.project_region {
        project(&mut x, x_star, mask);
    }
    telemetry.registered_norm = registered;
    Ok((x, telemetry))
}
