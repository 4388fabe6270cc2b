use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{bind_params, he_normal, Activation, Params};
use crate::numerics::{argmax, Bindings, Graph, NodeId, Tensor};

/// The interface metrics and attribution need from a classifier.
pub trait ImageClassifier {
    fn num_classes(&self) -> usize;

    /// Per-item log-probabilities for a `[B, C, H, W]` batch.
    fn log_probs(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>>;

    /// Per-item penultimate activations for a `[B, C, H, W]` batch.
    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>>;

    fn probs(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .log_probs(batch)?
            .into_iter()
            .map(|row| row.into_iter().map(f64::exp).collect())
            .collect())
    }

    /// Arg-max class of a single `[C, H, W]` image; ties go to the lowest index.
    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.log_probs(&image.batched())?[0]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub image_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            image_channels: 1,
            widths: vec![8, 16],
            kernel: 3,
            classes: 2,
            activation: Activation::Gelu,
        }
    }
}

/// Convolutional classifier with a global-average-pooled feature layer.
///
/// `image -> [conv, activation]* -> spatial mean (features) -> linear -> log-softmax`
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: ClassifierArch,
    params: Params,
    graph: Graph,
    nodes: ClassifierNodes,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ClassifierNodes {
    pub features: NodeId,
    pub log_probs: NodeId,
}

pub(crate) const CLF_PREFIX: &str = "clf";

impl Classifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let k = arch.kernel;
        let mut cin = arch.image_channels;
        for (i, &cout) in arch.widths.iter().enumerate() {
            params.insert(
                format!("{CLF_PREFIX}.conv{i}.w"),
                he_normal(&mut rng, &[cout, cin, k, k], cin * k * k),
            );
            params.insert(format!("{CLF_PREFIX}.conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        params.insert(
            format!("{CLF_PREFIX}.fc.w"),
            he_normal(&mut rng, &[cin, arch.classes], cin),
        );
        params.insert(format!("{CLF_PREFIX}.fc.b"), Tensor::zeros(&[arch.classes]));
        Self::from_params(arch, params).expect("freshly initialized parameters")
    }

    pub fn from_params(arch: ClassifierArch, params: Params) -> Result<Self> {
        if arch.classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut graph = Graph::new();
        let image = graph.input("image");
        let nodes = Self::append(&arch, &mut graph, image);
        let expected = 2 * (arch.widths.len() + 1);
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "classifier expects {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        Ok(Self {
            arch,
            params,
            graph,
            nodes,
        })
    }

    pub(crate) fn append(
        arch: &ClassifierArch,
        graph: &mut Graph,
        image: NodeId,
    ) -> ClassifierNodes {
        let mut h = image;
        for i in 0..arch.widths.len() {
            let w = graph.input(&format!("{CLF_PREFIX}.conv{i}.w"));
            let b = graph.input(&format!("{CLF_PREFIX}.conv{i}.b"));
            let c = graph.conv2d(h, w);
            let c = graph.add_bias(c, b);
            h = arch.activation.apply(graph, c);
        }
        let features = graph.spatial_mean(h);
        graph.set_label(features, "features");
        let w = graph.input(&format!("{CLF_PREFIX}.fc.w"));
        let b = graph.input(&format!("{CLF_PREFIX}.fc.b"));
        let logits = graph.matmul(features, w);
        let logits = graph.add_bias(logits, b);
        let log_probs = graph.log_softmax(logits);
        graph.set_label(log_probs, "log_probs");
        ClassifierNodes {
            features,
            log_probs,
        }
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn graph(&self) -> (&Graph, ClassifierNodes) {
        (&self.graph, self.nodes)
    }

    pub(crate) fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        bind_params(&self.params, bindings);
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        match batch.shape() {
            &[_, c, _, _] if c == self.arch.image_channels => Ok(()),
            s => Err(Error::invalid(format!(
                "classifier expects [B, {}, H, W], got {s:?}",
                self.arch.image_channels
            ))),
        }
    }

    fn run(&self, batch: &Tensor, node: NodeId) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let mut bindings = Bindings::new();
        self.bind(&mut bindings);
        bindings.bind_ref("image", batch);
        let ev = self.graph.evaluate(node, &bindings)?;
        let out = ev.output();
        let cols = out.shape()[1];
        Ok(out.data().chunks(cols).map(<[f64]>::to_vec).collect())
    }

    /// Log-probabilities of one `[C, H, W]` image.
    pub fn classify(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.log_probs(&image.batched())?.remove(0))
    }

    /// `log f(class | x)` per item and its gradient with respect to the batch.
    pub fn log_prob_and_grad(&self, batch: &Tensor, class: usize) -> Result<(Vec<f64>, Tensor)> {
        self.check_batch(batch)?;
        if class >= self.arch.classes {
            return Err(Error::invalid(format!(
                "class {class} outside 0..{}",
                self.arch.classes
            )));
        }
        let b = batch.shape()[0];
        let mut graph = self.graph.clone();
        let target = graph.input("target");
        let picked = graph.gather(self.nodes.log_probs, target);
        let root = graph.sum(picked);
        let mut bindings = Bindings::new();
        self.bind(&mut bindings);
        bindings.bind_ref("image", batch);
        bindings.bind("target", Tensor::full(&[b], class as f64));
        let ev = graph.evaluate(root, &bindings)?;
        let values = ev.value(picked).expect("evaluated").data().to_vec();
        let grad = ev.gradient("image")?;
        Ok((values, grad))
    }
}

impl ImageClassifier for Classifier {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn log_probs(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.run(batch, self.nodes.log_probs)
    }

    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.run(batch, self.nodes.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_probs_normalize() {
        let clf = Classifier::new(ClassifierArch::default(), 4);
        let x = Tensor::full(&[3, 1, 8, 8], 0.2);
        for row in clf.log_probs(&x).unwrap() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tied_logits_pick_lowest_class() {
        let mut clf = Classifier::new(ClassifierArch::default(), 4);
        for (name, p) in clf.params_mut().iter_mut() {
            if name.starts_with("clf.fc") {
                *p = Tensor::zeros(p.shape());
            }
        }
        let x = Tensor::full(&[1, 8, 8], 0.7);
        let lp = clf.classify(&x).unwrap();
        assert_eq!(lp[0], lp[1]);
        assert_eq!(clf.predict(&x).unwrap(), 0);
    }

    #[test]
    fn rejects_wrong_channels() {
        let clf = Classifier::new(ClassifierArch::default(), 4);
        assert!(clf.classify(&Tensor::zeros(&[3, 8, 8])).is_err());
    }
}
