//! Independent reference computations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use bridgelab::metrics::{EvalPair, FeatureStats};
use bridgelab::models::{
    Activation, Classifier, ClassifierArch, GuidedPair, ImageClassifier, ScoreArch, ScoreNetwork,
};
use bridgelab::numerics::{Bindings, Graph, NodeId, Tensor};
use bridgelab::{RegionMask, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Entries with magnitude in `[0.1, scale)`, so kinks at zero stay out of reach
/// of a finite-difference step.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..scale);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max |a - n| / max |n|`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.max_abs_diff(numeric).unwrap();
    let scale = numeric.max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `op` on fresh inputs, reduces a non-scalar output with a random
/// projection, and compares reverse-mode gradients against central
/// differences for every input in `wrt`.
pub fn check_op(
    rng: &mut impl Rng,
    build: impl Fn(&mut Graph) -> NodeId,
    wrt: Vec<(&str, Tensor)>,
    fixed: Vec<(&str, Tensor)>,
) -> f64 {
    let mut graph = Graph::new();
    let out = build(&mut graph);
    let mut probe = Bindings::new();
    for (name, t) in wrt.iter().chain(&fixed) {
        probe.bind(*name, t.clone());
    }
    let shape = graph
        .evaluate(out, &probe)
        .unwrap()
        .output()
        .shape()
        .to_vec();
    let root = if shape.is_empty() {
        out
    } else {
        let p = graph.input("proj");
        let m = graph.mul(out, p);
        graph.sum(m)
    };
    let proj = random_tensor(rng, &shape, 1.0);

    let eval = |values: &[Tensor]| -> f64 {
        let mut b = Bindings::new();
        for ((name, _), t) in wrt.iter().zip(values) {
            b.bind(*name, t.clone());
        }
        for (name, t) in &fixed {
            b.bind(*name, t.clone());
        }
        b.bind("proj", proj.clone());
        graph.evaluate(root, &b).unwrap().output().item()
    };
    let values: Vec<Tensor> = wrt.iter().map(|(_, t)| t.clone()).collect();
    let mut b = Bindings::new();
    for (name, t) in wrt.iter().chain(&fixed) {
        b.bind(*name, t.clone());
    }
    b.bind("proj", proj.clone());
    let names: Vec<&str> = wrt.iter().map(|(n, _)| *n).collect();
    let analytic = graph.evaluate(root, &b).unwrap().gradients(&names).unwrap();

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = fd_gradient(
            |x| {
                let mut v = values.clone();
                v[i] = x.clone();
                eval(&v)
            },
            &values[i],
            FD_STEP,
        );
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

/// Worst relative gradient error of every differentiable op on one random instance.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let b = r.gen_range(1..3);
    let c = r.gen_range(1..4);
    let h = r.gen_range(3..6);
    let w = r.gen_range(3..6);
    let img = [b, c, h, w];
    let mut out = Vec::new();

    let (x, y) = (random_tensor(r, &img, 1.0), random_tensor(r, &img, 1.0));
    out.push((
        "add",
        check_op(
            r,
            |g| {
                let (a, b) = (g.input("a"), g.input("b"));
                g.add(a, b)
            },
            vec![("a", x.clone()), ("b", y.clone())],
            vec![],
        ),
    ));
    out.push((
        "sub",
        check_op(
            r,
            |g| {
                let (a, b) = (g.input("a"), g.input("b"));
                g.sub(a, b)
            },
            vec![("a", x.clone()), ("b", y.clone())],
            vec![],
        ),
    ));
    out.push((
        "mul",
        check_op(
            r,
            |g| {
                let (a, b) = (g.input("a"), g.input("b"));
                g.mul(a, b)
            },
            vec![("a", x.clone()), ("b", y.clone())],
            vec![],
        ),
    ));
    let factor = r.gen_range(-2.0..2.0);
    out.push((
        "scale",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.scale(a, factor)
            },
            vec![("a", x.clone())],
            vec![],
        ),
    ));
    out.push((
        "add_scalar",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.add_scalar(a, factor)
            },
            vec![("a", x.clone())],
            vec![],
        ),
    ));
    out.push((
        "sum",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.sum(a)
            },
            vec![("a", x.clone())],
            vec![],
        ),
    ));
    out.push((
        "mean",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.mean(a)
            },
            vec![("a", x.clone())],
            vec![],
        ),
    ));
    out.push((
        "spatial_mean",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.spatial_mean(a)
            },
            vec![("a", x.clone())],
            vec![],
        ),
    ));
    let kinked = away_from_zero(r, &img, 1.0);
    out.push((
        "relu",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.relu(a)
            },
            vec![("a", kinked)],
            vec![],
        ),
    ));
    let wide = random_tensor(r, &img, 4.0);
    out.push((
        "gelu",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.gelu(a)
            },
            vec![("a", wide)],
            vec![],
        ),
    ));

    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let (lhs, rhs) = (
        random_tensor(r, &[m, k], 1.0),
        random_tensor(r, &[k, n], 1.0),
    );
    out.push((
        "matmul",
        check_op(
            r,
            |g| {
                let (a, b) = (g.input("a"), g.input("b"));
                g.matmul(a, b)
            },
            vec![("a", lhs), ("b", rhs)],
            vec![],
        ),
    ));

    let cout = r.gen_range(1..4);
    let kernel = [1, 3][r.gen_range(0..2)];
    let weights = random_tensor(r, &[cout, c, kernel, kernel], 1.0);
    out.push((
        "conv2d",
        check_op(
            r,
            |g| {
                let (a, w) = (g.input("x"), g.input("w"));
                g.conv2d(a, w)
            },
            vec![("x", x.clone()), ("w", weights)],
            vec![],
        ),
    ));
    let bias = random_tensor(r, &[c], 1.0);
    out.push((
        "add_bias",
        check_op(
            r,
            |g| {
                let (a, b) = (g.input("x"), g.input("b"));
                g.add_bias(a, b)
            },
            vec![("x", x.clone()), ("b", bias)],
            vec![],
        ),
    ));

    let c2 = r.gen_range(1..3);
    let other = random_tensor(r, &[b, c2, h, w], 1.0);
    out.push((
        "concat_channels",
        check_op(
            r,
            |g| {
                let (a, o) = (g.input("a"), g.input("o"));
                g.concat_channels(&[a, o, a])
            },
            vec![("a", x.clone()), ("o", other)],
            vec![],
        ),
    ));

    let rows = r.gen_range(1..5);
    let classes = r.gen_range(2..6);
    let logits = random_tensor(r, &[rows, classes], 3.0);
    out.push((
        "log_softmax",
        check_op(
            r,
            |g| {
                let a = g.input("a");
                g.log_softmax(a)
            },
            vec![("a", logits.clone())],
            vec![],
        ),
    ));
    let index = Tensor::new(
        vec![rows],
        (0..rows).map(|_| r.gen_range(0..classes) as f64).collect(),
    )
    .unwrap();
    out.push((
        "gather",
        check_op(
            r,
            |g| {
                let (a, i) = (g.input("a"), g.input("i"));
                g.gather(a, i)
            },
            vec![("a", logits)],
            vec![("i", index)],
        ),
    ));
    out
}

pub fn small_models(seed: u64) -> (ScoreNetwork, Classifier) {
    let score = ScoreNetwork::new(
        ScoreArch {
            image_channels: 1,
            widths: vec![4, 4],
            kernel: 3,
            time_features: 4,
        },
        seed,
    );
    let clf = Classifier::new(
        ClassifierArch {
            image_channels: 1,
            widths: vec![4],
            kernel: 3,
            classes: 2,
            activation: Activation::Gelu,
        },
        seed.wrapping_add(1),
    );
    (score, clf)
}

/// Relative error of the guidance gradient through score network and
/// classifier on a random 8x8 instance.
pub fn guided_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (score, clf) = small_models(seed);
    let pair = GuidedPair::new(&score, &clf).unwrap();
    let x = random_tensor(&mut rng, &[1, 8, 8], 1.0);
    let bits: Vec<u8> = (0..64)
        .map(|i| u8::from(i == 0 || rng.gen_bool(0.4)))
        .collect();
    let mask = RegionMask::new(8, 8, bits).unwrap();
    let t = rng.gen_range(0.1..0.9);
    let target = rng.gen_range(0..2);
    let analytic = pair.guided_gradient(&x, t, &mask, target).unwrap().gradient;
    let numeric = fd_gradient(
        |p| pair.guided_gradient(p, t, &mask, target).unwrap().log_prob,
        &x,
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

/// Logistic model on fixed pixel weights; every item is scored on its own,
/// so batched and single evaluation agree bit for bit.
pub struct PixelLogistic {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PixelLogistic {
    pub fn random(rng: &mut impl Rng, pixels: usize) -> Self {
        Self {
            weights: (0..pixels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            bias: rng.gen_range(-1.0..1.0),
        }
    }

    fn logit(&self, item: &[f64]) -> f64 {
        self.bias
            + item
                .iter()
                .zip(&self.weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

impl ImageClassifier for PixelLogistic {
    fn num_classes(&self) -> usize {
        2
    }

    fn log_probs(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let per = batch.numel() / batch.shape()[0];
        Ok(batch
            .data()
            .chunks(per)
            .map(|item| {
                let z = self.logit(item);
                let lp1 = -(1.0 + (-z).exp()).ln();
                let lp0 = -(1.0 + z.exp()).ln();
                vec![lp0, lp1]
            })
            .collect())
    }

    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let per = batch.numel() / batch.shape()[0];
        Ok(batch
            .data()
            .chunks(per)
            .map(|item| vec![self.logit(item)])
            .collect())
    }
}

/// COUT by explicit construction: the image at step `m` takes a pixel from
/// the counterfactual exactly when the pixel's rank by change is below
/// `m * ceil(n / M)`.
pub fn brute_force_cout(pair: &EvalPair, clf: &dyn ImageClassifier, steps: usize) -> f64 {
    let shape = pair.factual.shape().to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let f = pair.factual.data();
    let g = pair.counterfactual.data();
    let change: Vec<f64> = (0..n)
        .map(|p| (0..c).map(|ch| (g[ch * n + p] - f[ch * n + p]).abs()).sum())
        .collect();
    let rank = |p: usize| {
        (0..n)
            .filter(|&q| change[q] > change[p] || (change[q] == change[p] && q < p))
            .count()
    };
    let per_step = n.div_ceil(steps);
    let mut target = Vec::new();
    let mut source = Vec::new();
    for m in 0..=steps {
        let mut data = f.to_vec();
        for p in 0..n {
            if rank(p) < m * per_step {
                for ch in 0..c {
                    data[ch * n + p] = g[ch * n + p];
                }
            }
        }
        let image = Tensor::new(shape.clone(), data).unwrap();
        let probs = clf.probs(&image.batched()).unwrap().remove(0);
        target.push(probs[pair.target]);
        source.push(probs[pair.source]);
    }
    let area = |p: &[f64]| p.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / steps as f64;
    area(&target) - area(&source)
}

/// Fréchet distance of diagonal Gaussians in closed form.
pub fn diagonal_frechet(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let cov: f64 = v1
        .iter()
        .zip(v2)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    mean + cov
}

pub fn diagonal_stats(mean: &[f64], var: &[f64]) -> FeatureStats {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        cov[i * d + i] = var[i];
    }
    FeatureStats::new(mean.to_vec(), cov).unwrap()
}
