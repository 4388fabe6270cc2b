use crate::error::{Error, Result};
use crate::models::classifier::ClassifierNodes;
use crate::models::{Classifier, ScoreNetwork};
use crate::numerics::{Bindings, Graph, NodeId, Tensor};
use crate::regions::RegionMask;

/// Score network and classifier composed into one graph,
/// `x_n -> x̂₀(x_n) -> log f(y | x̂₀)`, so the classifier gradient is
/// backpropagated through the score network to the bridge state.
#[derive(Debug)]
pub struct GuidedPair<'m> {
    score: &'m ScoreNetwork,
    classifier: &'m Classifier,
    graph: Graph,
    x0_hat: NodeId,
    log_prob: NodeId,
    root: NodeId,
}

#[derive(Clone, Debug)]
pub struct GuidanceEval {
    pub x0_hat: Tensor,
    /// `log f(y | x̂₀)`.
    pub log_prob: f64,
    /// `∇_{x_n} log f(y | x̂₀(x_n))`, shaped like `x_n`.
    pub gradient: Tensor,
}

impl<'m> GuidedPair<'m> {
    pub fn new(score: &'m ScoreNetwork, classifier: &'m Classifier) -> Result<Self> {
        if score.arch().image_channels != classifier.arch().image_channels {
            return Err(Error::invalid(
                "score network and classifier disagree on image channels",
            ));
        }
        let mut graph = Graph::new();
        let x = graph.input("x_t");
        let mask = graph.input("mask");
        let time = graph.input("time");
        let x0_hat = ScoreNetwork::append(score.arch(), &mut graph, x, mask, time);
        let ClassifierNodes { log_probs, .. } =
            Classifier::append(classifier.arch(), &mut graph, x0_hat);
        let target = graph.input("target");
        let log_prob = graph.gather(log_probs, target);
        let root = graph.sum(log_prob);
        Ok(Self {
            score,
            classifier,
            graph,
            x0_hat,
            log_prob,
            root,
        })
    }

    pub fn score(&self) -> &ScoreNetwork {
        self.score
    }

    pub fn classifier(&self) -> &Classifier {
        self.classifier
    }

    fn bindings<'a>(
        &'a self,
        x_n: &'a Tensor,
        t: f64,
        mask: &RegionMask,
    ) -> Result<(Bindings<'a>, Tensor)> {
        mask.check_image(x_n)?;
        let batched = x_n.batched();
        let (mask_t, time_t) = self.score.batch_inputs(&batched, &[t], &[mask])?;
        let mut b = Bindings::new();
        self.score.bind(&mut b);
        self.classifier.bind(&mut b);
        b.bind("mask", mask_t);
        b.bind("time", time_t);
        Ok((b, batched))
    }

    /// `x̂₀(x_n)` alone. Bit-identical to [`ScoreNetwork::predict`].
    pub fn denoise(&self, x_n: &Tensor, t: f64, mask: &RegionMask) -> Result<Tensor> {
        let (mut b, batched) = self.bindings(x_n, t, mask)?;
        b.bind("x_t", batched);
        let ev = self.graph.evaluate(self.x0_hat, &b)?;
        ev.output().clone().reshape(x_n.shape())
    }

    /// `x̂₀(x_n)`, `log f(y | x̂₀)` and the full-chain gradient with respect to `x_n`.
    pub fn guided_gradient(
        &self,
        x_n: &Tensor,
        t: f64,
        mask: &RegionMask,
        target: usize,
    ) -> Result<GuidanceEval> {
        if target >= self.classifier.arch().classes {
            return Err(Error::invalid(format!(
                "target class {target} outside 0..{}",
                self.classifier.arch().classes
            )));
        }
        let (mut b, batched) = self.bindings(x_n, t, mask)?;
        b.bind("x_t", batched);
        b.bind("target", Tensor::scalar(target as f64));
        let ev = self.graph.evaluate(self.root, &b)?;
        let gradient = ev.gradient("x_t")?.reshape(x_n.shape())?;
        if !gradient.is_finite() {
            return Err(Error::NonFinite("classifier gradient".into()));
        }
        Ok(GuidanceEval {
            x0_hat: ev
                .value(self.x0_hat)
                .expect("evaluated")
                .clone()
                .reshape(x_n.shape())?,
            log_prob: ev.value(self.log_prob).expect("evaluated").item(),
            gradient,
        })
    }
}
