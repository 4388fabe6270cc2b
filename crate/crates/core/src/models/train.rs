use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::models::{params_finite, Classifier, Params, ScoreNetwork};
use crate::numerics::{adam_step_in_place, AdamConfig, AdamState, Bindings, Graph, NodeId, Tensor};
use crate::regions::{cells_covering, freeform_mask, RegionMask};
use crate::sampler::{corrupt, sample_posterior_q};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            adam: AdamConfig::with_lr(3e-3),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainConfig {
    pub train: TrainConfig,
    /// Variance scale of the bridge posterior used to corrupt training pairs.
    pub bridge_alpha: f64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 1500,
                batch_size: 16,
                adam: AdamConfig::with_lr(2e-3),
                seed: 0,
            },
            bridge_alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(n)..]
            .iter()
            .sum::<f64>()
            / n as f64
    }
}

/// Produces the editable regions the score network learns to fill.
pub trait MaskSampler {
    fn sample(&self, sample: &SyntheticSample, rng: &mut ChaCha8Rng) -> Result<RegionMask>;
}

/// Mixture of freeform strokes, object-biased grid cells and exact object masks.
#[derive(Clone, Debug)]
pub struct MixedMasks {
    pub freeform_area: (f64, f64),
    pub cell: usize,
}

impl Default for MixedMasks {
    fn default() -> Self {
        Self {
            freeform_area: (0.1, 0.3),
            cell: 4,
        }
    }
}

impl MaskSampler for MixedMasks {
    fn sample(&self, sample: &SyntheticSample, rng: &mut ChaCha8Rng) -> Result<RegionMask> {
        let s = sample.image.shape();
        let (h, w) = (s[1], s[2]);
        let pick: f64 = rng.gen();
        if pick < 0.3 {
            freeform_mask(rng, h, w, self.freeform_area)
        } else if pick < 0.45 {
            Ok(sample.object_mask())
        } else {
            // A random subset of the grid cells touching the object, plus a few stray cells.
            let object = sample.object_mask();
            let mut cells = cells_covering(&object, self.cell);
            cells.shuffle(rng);
            let keep = rng.gen_range(3..=cells.len().clamp(3, 16));
            cells.truncate(keep);
            let cols = w.div_ceil(self.cell);
            let rows = h.div_ceil(self.cell);
            for _ in 0..rng.gen_range(0..3) {
                cells.push(rng.gen_range(0..rows * cols));
            }
            let c = self.cell;
            Ok(RegionMask::from_fn(h, w, |y, x| {
                cells.contains(&((y / c) * cols + x / c))
            }))
        }
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng, order: &mut Vec<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch {
        if order.is_empty() {
            order.extend(0..n);
            order.shuffle(rng);
        }
        out.push(order.pop().expect("refilled"));
    }
    out
}

struct Optimizer {
    cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    fn new(cfg: AdamConfig, params: &Params) -> Self {
        Self {
            cfg,
            states: params
                .iter()
                .map(|(k, v)| (k.clone(), AdamState::zeros(v.numel())))
                .collect(),
        }
    }

    fn apply(&mut self, params: &mut Params, names: &[String], grads: Vec<Tensor>) -> Result<()> {
        for (name, g) in names.iter().zip(grads) {
            let state = self.states.get_mut(name).expect("state per parameter");
            let update = adam_step_in_place(&self.cfg, state, &g)?;
            let p = params.get_mut(name).expect("parameter");
            for (v, u) in p.data_mut().iter_mut().zip(update.data()) {
                *v -= u;
            }
        }
        Ok(())
    }
}

fn loss_graph(base: &Graph, prediction: NodeId, kind: LossKind) -> (Graph, NodeId) {
    let mut g = base.clone();
    let target = g.input("target");
    let root = match kind {
        LossKind::NegLogLikelihood => {
            let picked = g.gather(prediction, target);
            let m = g.mean(picked);
            g.scale(m, -1.0)
        }
        LossKind::MeanSquared => {
            let d = g.sub(prediction, target);
            let sq = g.mul(d, d);
            g.mean(sq)
        }
    };
    (g, root)
}

#[derive(Clone, Copy)]
enum LossKind {
    NegLogLikelihood,
    MeanSquared,
}

/// Minimizes the negative log-likelihood of the labels.
pub fn train_classifier(
    init: Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut clf = init;
    let (base, nodes) = clf.graph();
    let (graph, root) = loss_graph(base, nodes.log_probs, LossKind::NegLogLikelihood);
    let names: Vec<String> = clf.params().keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut opt = Optimizer::new(cfg.adam, clf.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = Vec::new();
    let mut report = TrainReport::default();

    for _ in 0..cfg.steps {
        let idx = batches(data.len(), cfg.batch_size, &mut rng, &mut order);
        let images: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
        let batch = Tensor::stack(&images)?;
        let labels = Tensor::from_vec(idx.iter().map(|&i| data.samples[i].label as f64).collect());
        let (loss, grads) = {
            let mut b = Bindings::new();
            clf.bind(&mut b);
            b.bind("image", batch);
            b.bind("target", labels);
            let ev = graph.evaluate(root, &b)?;
            (ev.output().item(), ev.gradients(&name_refs)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "classifier loss at step {}",
                report.losses.len()
            )));
        }
        report.losses.push(loss);
        opt.apply(clf.params_mut(), &names, grads)?;
    }
    if !params_finite(clf.params()) {
        return Err(Error::NonFinite("classifier parameters".into()));
    }
    Ok((clf, report))
}

/// One training pair: clean image, corrupted state, time and region.
pub(crate) struct BridgeExample {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub t: f64,
    pub mask: RegionMask,
}

pub(crate) fn bridge_example(
    sample: &SyntheticSample,
    masks: &dyn MaskSampler,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BridgeExample> {
    let mask = masks.sample(sample, rng)?;
    let x1 = corrupt(&sample.image, &mask, rng)?;
    let t: f64 = rng.gen_range(0.0..1.0);
    let x_t = sample_posterior_q(&sample.image, &x1, t, alpha, rng)?;
    Ok(BridgeExample {
        x0: sample.image.clone(),
        x_t,
        t,
        mask,
    })
}

fn score_batch_loss(
    net: &ScoreNetwork,
    graph: &Graph,
    root: NodeId,
    examples: &[BridgeExample],
    names: Option<&[&str]>,
) -> Result<(f64, Vec<Tensor>)> {
    let xs: Vec<&Tensor> = examples.iter().map(|e| &e.x_t).collect();
    let x0s: Vec<&Tensor> = examples.iter().map(|e| &e.x0).collect();
    let x = Tensor::stack(&xs)?;
    let times: Vec<f64> = examples.iter().map(|e| e.t).collect();
    let masks: Vec<&RegionMask> = examples.iter().map(|e| &e.mask).collect();
    let (mask_t, time_t) = net.batch_inputs(&x, &times, &masks)?;
    let mut b = Bindings::new();
    net.bind(&mut b);
    b.bind("x_t", x);
    b.bind("mask", mask_t);
    b.bind("time", time_t);
    b.bind("target", Tensor::stack(&x0s)?);
    let ev = graph.evaluate(root, &b)?;
    let loss = ev.output().item();
    let grads = match names {
        Some(n) => ev.gradients(n)?,
        None => Vec::new(),
    };
    Ok((loss, grads))
}

/// Mean squared error of `x̂₀` against the clean image on a fixed set of
/// corrupted examples drawn with `seed`.
pub fn score_loss(
    net: &ScoreNetwork,
    samples: &[SyntheticSample],
    masks: &dyn MaskSampler,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let (base, out) = net.graph();
    let (graph, root) = loss_graph(base, out, LossKind::MeanSquared);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let examples = chunk
            .iter()
            .map(|s| bridge_example(s, masks, alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, _) = score_batch_loss(net, &graph, root, &examples, None)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `x̂₀` prediction on bridge pairs: `x₁ = (1 - R) ⊙ x₀ + R ⊙ z`,
/// `t ~ U(0, 1)`, `x_t ~ q(x_t | x₀, x₁)`.
pub fn train_score(
    init: ScoreNetwork,
    data: &Dataset,
    masks: &dyn MaskSampler,
    cfg: &ScoreTrainConfig,
) -> Result<(ScoreNetwork, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.train.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = init;
    let (graph, root) = {
        let (base, out) = net.graph();
        loss_graph(base, out, LossKind::MeanSquared)
    };
    let names: Vec<String> = net.params().keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut opt = Optimizer::new(cfg.train.adam, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut order = Vec::new();
    let mut report = TrainReport::default();

    for step in 0..cfg.train.steps {
        let idx = batches(data.len(), cfg.train.batch_size, &mut rng, &mut order);
        let examples = idx
            .iter()
            .map(|&i| bridge_example(&data.samples[i], masks, cfg.bridge_alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = score_batch_loss(&net, &graph, root, &examples, Some(&name_refs))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("score loss at step {step}")));
        }
        report.losses.push(loss);
        opt.apply(net.params_mut(), &names, grads)?;
    }
    if !params_finite(net.params()) {
        return Err(Error::NonFinite("score parameters".into()));
    }
    Ok((net, report))
}
