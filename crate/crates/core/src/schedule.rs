//! Discretized bridge timeline.
//!
//! For a noise rate `beta(t)` on `[0, 1]` and a grid `0 = t_0 < ... < t_N = tau`
//! the schedule holds the accumulated variances
//!
//! * `sigma2[n]     = ∫_0^{t_n} beta`
//! * `sigma2_bar[n] = ∫_{t_n}^1 beta`
//! * `alpha2[n-1]   = ∫_{t_{n-1}}^{t_n} beta`
//!
//! and the mixing weights of the posterior step from `n` to `n - 1`,
//! `mu = alpha2 / (alpha2 + sigma2[n-1])` and `mu_bar = 1 - mu`.
//! A truncated timeline (`tau < 1`) keeps the same `beta` and simply stops
//! the grid at `tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum BetaSpec {
    /// `beta(t) = value`.
    Constant { value: f64 },
    /// Symmetric ramp: zero at both ends, `peak` at `t = 0.5`. Total variance `peak / 2`.
    Triangular { peak: f64 },
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Triangular { peak: 2.0 }
    }
}

impl BetaSpec {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            BetaSpec::Constant { value } => value,
            BetaSpec::Triangular { peak } => peak,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!(
                "beta must be non-negative, got {v}"
            )));
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            BetaSpec::Constant { value } => value,
            BetaSpec::Triangular { peak } => peak * (1.0 - (2.0 * t - 1.0).abs()),
        }
    }

    /// Where the rate stops being smooth, if anywhere.
    pub fn kink(&self) -> Option<f64> {
        match self {
            BetaSpec::Constant { .. } => None,
            BetaSpec::Triangular { .. } => Some(0.5),
        }
    }

    /// Closed-form `∫_0^t beta`.
    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            BetaSpec::Constant { value } => value * t,
            BetaSpec::Triangular { peak } => {
                if t <= 0.5 {
                    peak * t * t
                } else {
                    peak / 2.0 - peak * (1.0 - t) * (1.0 - t)
                }
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.cumulative(1.0)
    }
}

/// Composite Simpson rule on `[a, b]`; `intervals` is rounded up to an even count.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    ClosedForm,
    Simpson { intervals: usize },
}

/// Serialized form of a schedule: `{kind, params, N, tau}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub beta: BetaSpec,
    #[serde(rename = "N")]
    pub steps: usize,
    pub tau: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            beta: BetaSpec::default(),
            steps: 100,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSchedule {
    pub beta: BetaSpec,
    pub steps: usize,
    pub tau: f64,
    pub times: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma2_bar: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_bar: Vec<f64>,
}

/// Mixing weights and variance of the posterior step `n -> n - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub mu: f64,
    pub mu_bar: f64,
    pub var: f64,
}

/// `mu = alpha2 / (alpha2 + sigma2)`, `mu_bar = 1 - mu`,
/// `var = alpha2 * sigma2 / (alpha2 + sigma2)`. With no accumulated variance on
/// either side the step follows the clean estimate (`mu = 1`).
pub fn mixing(alpha2: f64, sigma2: f64) -> PosteriorCoefficients {
    let denom = alpha2 + sigma2;
    if denom <= 0.0 {
        return PosteriorCoefficients {
            mu: 1.0,
            mu_bar: 0.0,
            var: 0.0,
        };
    }
    let mu = alpha2 / denom;
    PosteriorCoefficients {
        mu,
        mu_bar: 1.0 - mu,
        var: alpha2 * sigma2 / denom,
    }
}

impl BridgeSchedule {
    pub fn build(steps: usize, beta: BetaSpec, tau: f64) -> Result<Self> {
        Self::build_with(steps, beta, tau, Integration::ClosedForm)
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::build(spec.steps, spec.beta, spec.tau)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            beta: self.beta,
            steps: self.steps,
            tau: self.tau,
        }
    }

    pub fn build_with(
        steps: usize,
        beta: BetaSpec,
        tau: f64,
        integration: Integration,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")));
        }
        beta.validate()?;

        let integral = |a: f64, b: f64| match integration {
            Integration::ClosedForm => beta.cumulative(b) - beta.cumulative(a),
            Integration::Simpson { intervals } => {
                let n = intervals.max(1000);
                match beta.kink().filter(|&k| a < k && k < b) {
                    Some(k) => {
                        simpson(|t| beta.rate(t), a, k, n) + simpson(|t| beta.rate(t), k, b, n)
                    }
                    None => simpson(|t| beta.rate(t), a, b, n),
                }
            }
        };

        let times: Vec<f64> = (0..=steps).map(|n| tau * n as f64 / steps as f64).collect();
        let sigma2: Vec<f64> = times
            .iter()
            .map(|&t| if t == 0.0 { 0.0 } else { integral(0.0, t) })
            .collect();
        let sigma2_bar: Vec<f64> = times.iter().map(|&t| integral(t, 1.0)).collect();
        let alpha2: Vec<f64> = times.windows(2).map(|w| integral(w[0], w[1])).collect();
        let (mu, mu_bar) = alpha2
            .iter()
            .zip(&sigma2)
            .map(|(&a, &s)| {
                let c = mixing(a, s);
                (c.mu, c.mu_bar)
            })
            .unzip();

        Ok(Self {
            beta,
            steps,
            tau,
            times,
            sigma2,
            sigma2_bar,
            alpha2,
            mu,
            mu_bar,
        })
    }

    pub fn posterior_coefficients(&self, n: usize) -> Result<PosteriorCoefficients> {
        if n == 0 || n > self.steps {
            return Err(Error::invalid(format!(
                "step index {n} outside 1..={}",
                self.steps
            )));
        }
        Ok(mixing(self.alpha2[n - 1], self.sigma2[n - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_beta_grid() {
        let s = BridgeSchedule::build(4, BetaSpec::Constant { value: 1.0 }, 1.0).unwrap();
        assert_eq!(s.sigma2, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.mu_bar[0], 0.0);
    }

    #[test]
    fn posterior_formula() {
        let c = mixing(0.1, 0.3);
        assert!((c.mu - 0.25).abs() < 1e-15);
        assert!((c.mu_bar - 0.75).abs() < 1e-15);
        assert!((c.var - 0.075).abs() < 1e-15);
        assert_eq!(
            mixing(0.4, 0.0),
            PosteriorCoefficients {
                mu: 1.0,
                mu_bar: 0.0,
                var: 0.0
            }
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        let beta = BetaSpec::default();
        assert!(BridgeSchedule::build(1, beta, 1.0).is_err());
        assert!(BridgeSchedule::build(4, beta, 0.0).is_err());
        assert!(BridgeSchedule::build(4, beta, 1.5).is_err());
        assert!(BridgeSchedule::build(4, BetaSpec::Constant { value: -1.0 }, 1.0).is_err());
        let s = BridgeSchedule::build(4, beta, 1.0).unwrap();
        assert!(s.posterior_coefficients(0).is_err());
        assert!(s.posterior_coefficients(5).is_err());
        assert!(s.posterior_coefficients(4).is_ok());
    }

    #[test]
    fn triangular_total_variance() {
        let s = BridgeSchedule::build(10, BetaSpec::default(), 1.0).unwrap();
        assert!((s.sigma2[10] - 1.0).abs() < 1e-15);
        let q = simpson(|t| BetaSpec::default().rate(t), 0.0, 1.0, 1000);
        assert!((q - 1.0).abs() < 1e-8);
    }

    #[test]
    fn spec_json_shape() {
        let spec = ScheduleSpec::default();
        let json = serde_json::to_value(spec).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"kind": "triangular", "params": {"peak": 2.0}, "N": 100, "tau": 1.0})
        );
        let back: ScheduleSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }
}
