use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// ADAM hyperparameters. Defaults follow the common reference-framework values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates and step counter for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One ADAM recurrence: advances the moments with `g` and returns the
/// bias-corrected update `lr * m_hat / (sqrt(v_hat) + eps)` alongside the new state.
pub fn adam_step(cfg: &AdamConfig, state: AdamState, g: &Tensor) -> Result<(AdamState, Tensor)> {
    let mut state = state;
    let update = adam_step_in_place(cfg, &mut state, g)?;
    Ok((state, update))
}

pub(crate) fn adam_step_in_place(
    cfg: &AdamConfig,
    state: &mut AdamState,
    g: &Tensor,
) -> Result<Tensor> {
    if state.m.len() != g.numel() || state.v.len() != g.numel() {
        return Err(Error::invalid(format!(
            "adam state holds {} values, gradient has {}",
            state.m.len(),
            g.numel()
        )));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient passed to adam".into()));
    }
    state.step += 1;
    let n = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(n);
    let bc2 = 1.0 - cfg.beta2.powi(n);
    let mut out = Vec::with_capacity(g.numel());
    for ((m, v), &gv) in state.m.iter_mut().zip(state.v.iter_mut()).zip(g.data()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        out.push(cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    Ok(Tensor::from_parts(g.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_normalized() {
        let cfg = AdamConfig::with_lr(1.0);
        let (state, u) = adam_step(&cfg, AdamState::zeros(1), &Tensor::scalar(5.0)).unwrap();
        assert_eq!(state.step, 1);
        let expected = 5.0 / (5.0 + cfg.eps);
        assert!((u.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let cfg = AdamConfig::with_lr(1.0);
        let mut state = AdamState::zeros(3);
        for _ in 0..5 {
            let (s, u) = adam_step(&cfg, state, &Tensor::zeros(&[3])).unwrap();
            assert!(u.data().iter().all(|&v| v == 0.0));
            state = s;
        }
    }

    #[test]
    fn constant_gradient_tends_to_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.5);
        let g = Tensor::from_vec(vec![3.0, -0.2, 1e-3]);
        let mut state = AdamState::zeros(3);
        let mut last = Tensor::zeros(&[3]);
        for _ in 0..100 {
            let (s, u) = adam_step(&cfg, state, &g).unwrap();
            state = s;
            last = u;
        }
        for (u, gv) in last.data().iter().zip(g.data()) {
            assert!((u - 0.5 * gv.signum()).abs() < 1e-3, "{u}");
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let cfg = AdamConfig::default();
        let g = Tensor::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(
            adam_step(&cfg, AdamState::zeros(2), &g),
            Err(Error::NonFinite(_))
        ));
    }
}
