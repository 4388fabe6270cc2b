use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{bind_params, he_normal, Params};
use crate::numerics::{Bindings, Graph, NodeId, Tensor};
use crate::regions::RegionMask;

/// Anything that maps a bridge state to an estimate of the clean image.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &Tensor, t: f64, mask: &RegionMask) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreArch {
    pub image_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Number of sinusoidal time channels appended to the input.
    pub time_features: usize,
}

impl Default for ScoreArch {
    fn default() -> Self {
        Self {
            image_channels: 1,
            widths: vec![16, 16, 16],
            kernel: 3,
            time_features: 4,
        }
    }
}

/// `[sin(πt/2), cos(πt/2), sin(πt), cos(πt), ...]`, `count` entries.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let freq = (i / 2 + 1) as f64 * std::f64::consts::FRAC_PI_2;
            if i % 2 == 0 {
                (freq * t).sin()
            } else {
                (freq * t).cos()
            }
        })
        .collect()
}

/// Predicts the clean image directly from `(x_t, t, R)`.
///
/// Input channels are the state, the region mask and constant time maps;
/// a stack of ReLU convolutions produces a correction that is added back to
/// the state, so the output has the shape of `x_t`.
#[derive(Clone, Debug)]
pub struct ScoreNetwork {
    arch: ScoreArch,
    params: Params,
    graph: Graph,
    output: NodeId,
}

pub(crate) const SCORE_PREFIX: &str = "score";

impl ScoreNetwork {
    pub fn new(arch: ScoreArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let k = arch.kernel;
        let mut cin = arch.image_channels + 1 + arch.time_features;
        let mut widths = arch.widths.clone();
        widths.push(arch.image_channels);
        let last = widths.len() - 1;
        for (i, &cout) in widths.iter().enumerate() {
            let mut w = he_normal(&mut rng, &[cout, cin, k, k], cin * k * k);
            if i == last {
                w = w.scale(0.1);
            }
            params.insert(format!("{SCORE_PREFIX}.conv{i}.w"), w);
            params.insert(format!("{SCORE_PREFIX}.conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        Self::from_params(arch, params).expect("freshly initialized parameters")
    }

    pub fn from_params(arch: ScoreArch, params: Params) -> Result<Self> {
        let mut graph = Graph::new();
        let x = graph.input("x_t");
        let mask = graph.input("mask");
        let time = graph.input("time");
        let output = Self::append(&arch, &mut graph, x, mask, time);
        let net = Self {
            arch,
            params,
            graph,
            output,
        };
        net.check_params()?;
        Ok(net)
    }

    fn check_params(&self) -> Result<()> {
        let expected = 2 * (self.arch.widths.len() + 1);
        if self.params.len() != expected {
            return Err(Error::invalid(format!(
                "score network expects {expected} parameter tensors, got {}",
                self.params.len()
            )));
        }
        for name in self.graph.input_names() {
            if name.starts_with(SCORE_PREFIX) && !self.params.contains_key(name) {
                return Err(Error::MissingMetadata(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    /// Adds the network to `graph`, reading its state, mask and time maps from
    /// the given nodes. Returns the `x̂₀` node.
    pub(crate) fn append(
        arch: &ScoreArch,
        graph: &mut Graph,
        x: NodeId,
        mask: NodeId,
        time: NodeId,
    ) -> NodeId {
        let mut h = graph.concat_channels(&[x, mask, time]);
        let layers = arch.widths.len() + 1;
        for i in 0..layers {
            let w = graph.input(&format!("{SCORE_PREFIX}.conv{i}.w"));
            let b = graph.input(&format!("{SCORE_PREFIX}.conv{i}.b"));
            let c = graph.conv2d(h, w);
            h = graph.add_bias(c, b);
            if i + 1 < layers {
                h = graph.relu(h);
            }
        }
        let out = graph.add(x, h);
        graph.set_label(out, "x0_hat");
        out
    }

    pub fn arch(&self) -> &ScoreArch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn graph(&self) -> (&Graph, NodeId) {
        (&self.graph, self.output)
    }

    pub(crate) fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        bind_params(&self.params, bindings);
    }

    /// Bindings for a batch: `x` is `[B, C, H, W]`, one time and mask per item.
    pub(crate) fn batch_inputs(
        &self,
        x: &Tensor,
        times: &[f64],
        masks: &[&RegionMask],
    ) -> Result<(Tensor, Tensor)> {
        let shape = x.shape();
        let (b, c, h, w) = match shape {
            &[b, c, h, w] => (b, c, h, w),
            s => {
                return Err(Error::invalid(format!(
                    "score input must be [B, C, H, W], got {s:?}"
                )))
            }
        };
        if c != self.arch.image_channels {
            return Err(Error::invalid(format!(
                "score network expects {} channels, got {c}",
                self.arch.image_channels
            )));
        }
        if times.len() != b || masks.len() != b {
            return Err(Error::invalid("one time and one mask per batch item"));
        }
        let hw = h * w;
        let mut mask_data = Vec::with_capacity(b * hw);
        for m in masks {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::invalid(format!(
                    "mask {}x{} does not fit {h}x{w} input",
                    m.height(),
                    m.width()
                )));
            }
            mask_data.extend(m.bits().iter().map(|&v| v as f64));
        }
        let tf = self.arch.time_features;
        let mut time_data = Vec::with_capacity(b * tf * hw);
        for &t in times {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("time {t} outside [0, 1]")));
            }
            for f in time_features(t, tf) {
                time_data.extend(std::iter::repeat_n(f, hw));
            }
        }
        Ok((
            Tensor::from_parts(vec![b, 1, h, w], mask_data),
            Tensor::from_parts(vec![b, tf, h, w], time_data),
        ))
    }

    pub fn predict_batch(
        &self,
        x: &Tensor,
        times: &[f64],
        masks: &[&RegionMask],
    ) -> Result<Tensor> {
        let (mask, time) = self.batch_inputs(x, times, masks)?;
        let mut bindings = Bindings::new();
        self.bind(&mut bindings);
        bindings.bind_ref("x_t", x);
        bindings.bind("mask", mask);
        bindings.bind("time", time);
        Ok(self
            .graph
            .evaluate(self.output, &bindings)?
            .output()
            .clone())
    }

    /// `x̂₀` for one `[C, H, W]` state.
    pub fn predict(&self, x_t: &Tensor, t: f64, mask: &RegionMask) -> Result<Tensor> {
        mask.check_image(x_t)?;
        let out = self.predict_batch(&x_t.batched(), &[t], &[mask])?;
        out.reshape(x_t.shape())
    }
}

impl Denoiser for ScoreNetwork {
    fn predict_x0(&self, x_t: &Tensor, t: f64, mask: &RegionMask) -> Result<Tensor> {
        self.predict(x_t, t, mask)
    }
}

/// Score implied by a clean-image estimate: `(x̂₀ - x_t) / σ²_t`.
pub fn tweedie_to_score(x0_hat: &Tensor, x_t: &Tensor, sigma2_t: f64) -> Result<Tensor> {
    if sigma2_t <= 0.0 || !sigma2_t.is_finite() {
        return Err(Error::invalid(format!(
            "variance must be positive, got {sigma2_t}"
        )));
    }
    x0_hat.zip_map(x_t, |a, b| (a - b) / sigma2_t)
}

/// Clean-image estimate from a score: `x̂₀ = x_t + σ²_t · score`.
pub fn score_to_tweedie(score: &Tensor, x_t: &Tensor, sigma2_t: f64) -> Result<Tensor> {
    if sigma2_t <= 0.0 || !sigma2_t.is_finite() {
        return Err(Error::invalid(format!(
            "variance must be positive, got {sigma2_t}"
        )));
    }
    x_t.zip_map(score, |x, s| x + sigma2_t * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_output_has_input_shape() {
        let net = ScoreNetwork::new(ScoreArch::default(), 1);
        let x = Tensor::full(&[1, 32, 32], 0.3);
        let mask = RegionMask::from_fn(32, 32, |y, _| y < 10);
        let out = net.predict(&x, 0.4, &mask).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.is_finite());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let net = ScoreNetwork::new(ScoreArch::default(), 1);
        let x = Tensor::full(&[1, 16, 16], 0.3);
        assert!(net.predict(&x, 0.5, &RegionMask::full(32, 32)).is_err());
        let x3 = Tensor::full(&[3, 32, 32], 0.3);
        assert!(net.predict(&x3, 0.5, &RegionMask::full(32, 32)).is_err());
    }

    #[test]
    fn tweedie_arithmetic() {
        let x_t = Tensor::scalar(0.5);
        let x0 = score_to_tweedie(&Tensor::scalar(1.0), &x_t, 0.2).unwrap();
        assert!((x0.item() - 0.7).abs() < 1e-15);
        assert_eq!(tweedie_to_score(&x_t, &x_t, 0.2).unwrap().item(), 0.0);
        assert!(tweedie_to_score(&x0, &x_t, 0.0).is_err());
    }
}
