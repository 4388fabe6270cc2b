use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numerics::Tensor;

/// What an attribution method needs: `log f(y | x)` and its input gradient.
pub trait AttributionModel {
    fn num_classes(&self) -> usize;

    /// `log f(class | x)` for each item of a `[B, C, H, W]` batch and the
    /// gradient of their sum with respect to the batch.
    fn value_and_grad(&self, batch: &Tensor, class: usize) -> Result<(Vec<f64>, Tensor)>;

    fn value(&self, batch: &Tensor, class: usize) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(batch, class)?.0)
    }
}

impl AttributionModel for Classifier {
    fn num_classes(&self) -> usize {
        self.arch().classes
    }

    fn value_and_grad(&self, batch: &Tensor, class: usize) -> Result<(Vec<f64>, Tensor)> {
        self.log_prob_and_grad(batch, class)
    }

    fn value(&self, batch: &Tensor, class: usize) -> Result<Vec<f64>> {
        use crate::models::ImageClassifier;
        if class >= self.arch().classes {
            return Err(Error::invalid(format!(
                "class {class} outside 0..{}",
                self.arch().classes
            )));
        }
        Ok(self
            .log_probs(batch)?
            .into_iter()
            .map(|row| row[class])
            .collect())
    }
}

/// Per-pixel importance, summed over channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribution map".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sums a `[C, H, W]` tensor over channels after applying `f`.
    fn channel_sum(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::invalid(format!("expected [C, H, W], got {s:?}"))),
        };
        let mut values = vec![0.0; h * w];
        for ch in 0..c {
            for (v, &x) in values
                .iter_mut()
                .zip(&t.data()[ch * h * w..(ch + 1) * h * w])
            {
                *v += f(x);
            }
        }
        Self::new(h, w, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AttributionMethod {
    Saliency,
    InputXGradient,
    IntegratedGradients { steps: usize },
    Occlusion { patch: usize },
}

impl AttributionMethod {
    pub const DEFAULT_IG_STEPS: usize = 256;
    pub const DEFAULT_PATCH: usize = 4;

    pub fn name(&self) -> &'static str {
        match self {
            Self::Saliency => "saliency",
            Self::InputXGradient => "input_x_gradient",
            Self::IntegratedGradients { .. } => "integrated_gradients",
            Self::Occlusion { .. } => "occlusion",
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Self::Saliency),
            "input_x_gradient" => Ok(Self::InputXGradient),
            "integrated_gradients" => Ok(Self::IntegratedGradients {
                steps: Self::DEFAULT_IG_STEPS,
            }),
            "occlusion" => Ok(Self::Occlusion {
                patch: Self::DEFAULT_PATCH,
            }),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

fn check_inputs(model: &dyn AttributionModel, x: &Tensor, class: usize) -> Result<()> {
    if x.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "expected [C, H, W] image, got {:?}",
            x.shape()
        )));
    }
    if class >= model.num_classes() {
        return Err(Error::invalid(format!(
            "class {class} outside 0..{}",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Attribution of `log f(class | x)` to the pixels of a `[C, H, W]` image.
pub fn attribute(
    method: AttributionMethod,
    model: &dyn AttributionModel,
    x: &Tensor,
    class: usize,
) -> Result<AttributionMap> {
    check_inputs(model, x, class)?;
    match method {
        AttributionMethod::Saliency => {
            let (_, g) = model.value_and_grad(&x.batched(), class)?;
            AttributionMap::channel_sum(&g.reshape(x.shape())?, f64::abs)
        }
        AttributionMethod::InputXGradient => {
            let (_, g) = model.value_and_grad(&x.batched(), class)?;
            AttributionMap::channel_sum(&x.mul(&g.reshape(x.shape())?)?, f64::abs)
        }
        AttributionMethod::IntegratedGradients { steps } => {
            integrated_gradients(model, x, class, steps)
        }
        AttributionMethod::Occlusion { patch } => occlusion(model, x, class, patch),
    }
}

const CHUNK: usize = 32;

/// Integrated gradients from a zero baseline with the `m`-point midpoint rule:
/// `IG_i = x_i · (1/m) Σ_k ∂f/∂x_i((k + ½)/m · x)`. Signed, channel-summed.
pub fn integrated_gradients(
    model: &dyn AttributionModel,
    x: &Tensor,
    class: usize,
    steps: usize,
) -> Result<AttributionMap> {
    check_inputs(model, x, class)?;
    if steps < 1 {
        return Err(Error::invalid(
            "integrated gradients needs at least one step",
        ));
    }
    let n = x.numel();
    let mut avg = vec![0.0; n];
    let alphas: Vec<f64> = (0..steps)
        .map(|k| (k as f64 + 0.5) / steps as f64)
        .collect();
    for chunk in alphas.chunks(CHUNK) {
        let points: Vec<Tensor> = chunk.iter().map(|&a| x.scale(a)).collect();
        let refs: Vec<&Tensor> = points.iter().collect();
        let (_, g) = model.value_and_grad(&Tensor::stack(&refs)?, class)?;
        for item in g.data().chunks(n) {
            for (a, v) in avg.iter_mut().zip(item) {
                *a += v;
            }
        }
    }
    let contrib: Vec<f64> = avg
        .iter()
        .zip(x.data())
        .map(|(g, xi)| xi * g / steps as f64)
        .collect();
    AttributionMap::channel_sum(&Tensor::new(x.shape().to_vec(), contrib)?, |v| v)
}

/// Score drop when each `patch × patch` block (stride `patch`) is set to zero.
fn occlusion(
    model: &dyn AttributionModel,
    x: &Tensor,
    class: usize,
    patch: usize,
) -> Result<AttributionMap> {
    if patch == 0 {
        return Err(Error::invalid("occlusion patch must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let base = model.value(&x.batched(), class)?[0];
    let mut blocks = Vec::new();
    for by in (0..h).step_by(patch) {
        for bx in (0..w).step_by(patch) {
            blocks.push((by, bx));
        }
    }
    let mut values = vec![0.0; h * w];
    for chunk in blocks.chunks(CHUNK) {
        let occluded: Vec<Tensor> = chunk
            .iter()
            .map(|&(by, bx)| {
                let mut t = x.clone();
                let data = t.data_mut();
                for ch in 0..c {
                    for y in by..(by + patch).min(h) {
                        for xx in bx..(bx + patch).min(w) {
                            data[ch * h * w + y * w + xx] = 0.0;
                        }
                    }
                }
                t
            })
            .collect();
        let refs: Vec<&Tensor> = occluded.iter().collect();
        let scores = model.value(&Tensor::stack(&refs)?, class)?;
        for (&(by, bx), s) in chunk.iter().zip(scores) {
            for y in by..(by + patch).min(h) {
                for xx in bx..(bx + patch).min(w) {
                    values[y * w + xx] = base - s;
                }
            }
        }
    }
    AttributionMap::new(h, w, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = w · x`, independent of the class.
    struct Linear(Vec<f64>);

    impl AttributionModel for Linear {
        fn num_classes(&self) -> usize {
            2
        }

        fn value_and_grad(&self, batch: &Tensor, _class: usize) -> Result<(Vec<f64>, Tensor)> {
            let n = self.0.len();
            let b = batch.shape()[0];
            let values = batch
                .data()
                .chunks(n)
                .map(|x| x.iter().zip(&self.0).map(|(a, w)| a * w).sum())
                .collect();
            let grad = Tensor::new(
                batch.shape().to_vec(),
                (0..b).flat_map(|_| self.0.iter().copied()).collect(),
            )?;
            Ok((values, grad))
        }
    }

    fn setup() -> (Linear, Tensor) {
        let w: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) * 0.1).collect();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| 0.05 * i as f64).collect()).unwrap();
        (Linear(w), x)
    }

    #[test]
    fn ig_on_linear_model_is_weight_times_input() {
        let (model, x) = setup();
        let ig = integrated_gradients(&model, &x, 0, 3).unwrap();
        for i in 0..16 {
            assert!((ig.values[i] - model.0[i] * x.data()[i]).abs() < 1e-12);
        }
        let fx = model.value(&x.batched(), 0).unwrap()[0];
        assert!((ig.total() - fx).abs() < 1e-12);
    }

    #[test]
    fn saliency_and_input_x_gradient() {
        let (model, x) = setup();
        let s = attribute(AttributionMethod::Saliency, &model, &x, 1).unwrap();
        let ixg = attribute(AttributionMethod::InputXGradient, &model, &x, 1).unwrap();
        for i in 0..16 {
            assert_eq!(s.values[i], model.0[i].abs());
            assert!((ixg.values[i] - (model.0[i] * x.data()[i]).abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn occlusion_records_block_drop() {
        let (model, x) = setup();
        let occ = attribute(AttributionMethod::Occlusion { patch: 2 }, &model, &x, 0).unwrap();
        let block: f64 = [0usize, 1, 4, 5]
            .iter()
            .map(|&i| model.0[i] * x.data()[i])
            .sum();
        for i in [0usize, 1, 4, 5] {
            assert!((occ.values[i] - block).abs() < 1e-12);
        }
    }

    #[test]
    fn argument_errors() {
        let (model, x) = setup();
        assert!(integrated_gradients(&model, &x, 0, 0).is_err());
        assert!(attribute(AttributionMethod::Saliency, &model, &x, 2).is_err());
        assert!(matches!(
            "gradcam".parse::<AttributionMethod>(),
            Err(Error::UnknownMethod(_))
        ));
        assert_eq!(
            "occlusion".parse::<AttributionMethod>().unwrap(),
            AttributionMethod::Occlusion { patch: 4 }
        );
    }
}
