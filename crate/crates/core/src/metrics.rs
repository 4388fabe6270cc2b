//! Counterfactual quality metrics: flip rate, COUT, Fréchet feature distance
//! and its folded variant, feature similarity and diversity.
//!
//! Feature-space metrics use the classifier's penultimate layer. Feature
//! similarity and diversity are substitutes for self-supervised and
//! perceptual feature metrics and are labeled as such in reports.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ImageClassifier;
use crate::numerics::{argmax, Tensor};

/// A factual image, its counterfactual, and the classes involved.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub factual: Tensor,
    pub counterfactual: Tensor,
    pub target: usize,
    pub source: usize,
}

impl EvalPair {
    pub fn new(
        factual: Tensor,
        counterfactual: Tensor,
        target: usize,
        source: usize,
    ) -> Result<Self> {
        factual.expect_same_shape(&counterfactual)?;
        Ok(Self {
            factual,
            counterfactual,
            target,
            source,
        })
    }
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

/// Fraction of counterfactuals classified as their target.
pub fn flip_rate(pairs: &[EvalPair], clf: &dyn ImageClassifier) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("flip rate of an empty set"));
    }
    let mut flipped = 0usize;
    for chunk in pairs.chunks(64) {
        let batch = stack(&chunk.iter().map(|p| &p.counterfactual).collect::<Vec<_>>())?;
        for (row, p) in clf.log_probs(&batch)?.iter().zip(chunk) {
            if argmax(row) == p.target {
                flipped += 1;
            }
        }
    }
    Ok(flipped as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trapezoid {
    /// `½ (f(x⁽ᵐ⁾) + f(x⁽ᵐ⁺¹⁾))`.
    #[default]
    Plus,
    /// `½ (f(x⁽ᵐ⁾) - f(x⁽ᵐ⁺¹⁾))`, kept for comparison only; it telescopes.
    PrintedMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoutConfig {
    pub steps: usize,
    pub trapezoid: Trapezoid,
}

impl Default for CoutConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            trapezoid: Trapezoid::Plus,
        }
    }
}

/// The insertion path `x⁽⁰⁾ = factual, …, x⁽ᴹ⁾ = counterfactual`: pixels are
/// copied from the counterfactual in descending order of absolute change
/// (channel-summed, ties by pixel index), `ceil(n / M)` per step.
pub fn insertion_sequence(pair: &EvalPair, steps: usize) -> Result<Vec<Tensor>> {
    if steps < 1 {
        return Err(Error::invalid("COUT needs at least one step"));
    }
    let (c, h, w) = match pair.factual.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::invalid(format!("expected [C, H, W], got {s:?}"))),
    };
    let n = h * w;
    let f = pair.factual.data();
    let g = pair.counterfactual.data();
    let change: Vec<f64> = (0..n)
        .map(|i| (0..c).map(|ch| (g[ch * n + i] - f[ch * n + i]).abs()).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| change[b].total_cmp(&change[a]).then(a.cmp(&b)));
    let per_step = n.div_ceil(steps);

    let mut seq = Vec::with_capacity(steps + 1);
    let mut current = pair.factual.clone();
    seq.push(current.clone());
    for m in 0..steps {
        let lo = (m * per_step).min(n);
        let hi = ((m + 1) * per_step).min(n);
        let data = current.data_mut();
        for &p in &order[lo..hi] {
            for ch in 0..c {
                data[ch * n + p] = g[ch * n + p];
            }
        }
        seq.push(current.clone());
    }
    Ok(seq)
}

/// Area under the class probability along a path, by the trapezoid rule.
pub fn aupc(probs: &[f64], trapezoid: Trapezoid) -> f64 {
    let m = probs.len() - 1;
    let total: f64 = probs
        .windows(2)
        .map(|w| match trapezoid {
            Trapezoid::Plus => 0.5 * (w[0] + w[1]),
            Trapezoid::PrintedMinus => 0.5 * (w[0] - w[1]),
        })
        .sum();
    total / m as f64
}

/// `AUPC_target - AUPC_source` along the insertion path. Identical images give
/// a constant path and therefore `f(target) - f(source)` at the factual.
pub fn cout(pair: &EvalPair, clf: &dyn ImageClassifier, cfg: &CoutConfig) -> Result<f64> {
    let classes = clf.num_classes();
    if pair.target >= classes || pair.source >= classes {
        return Err(Error::invalid(
            "pair classes outside the classifier's range",
        ));
    }
    let seq = insertion_sequence(pair, cfg.steps)?;
    let batch = stack(&seq.iter().collect::<Vec<_>>())?;
    let probs = clf.probs(&batch)?;
    let target: Vec<f64> = probs.iter().map(|p| p[pair.target]).collect();
    let source: Vec<f64> = probs.iter().map(|p| p[pair.source]).collect();
    Ok(aupc(&target, cfg.trapezoid) - aupc(&source, cfg.trapezoid))
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim` unbiased covariance.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::invalid(
                "feature statistics need at least two samples",
            ));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("features must share one nonzero dimension"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; dim * dim];
        for f in features {
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1.0);
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Ok(Self {
            dim,
            count: features.len(),
            mean,
            cov,
        })
    }

    /// Stats with the given moments, checked for symmetry and positive semidefiniteness.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::invalid("covariance must be dim × dim"));
        }
        let stats = Self {
            dim,
            count: 0,
            mean,
            cov,
        };
        stats.check_psd()?;
        Ok(stats)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }

    pub fn check_psd(&self) -> Result<()> {
        let m = self.matrix();
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-8 {
            return Err(Error::invalid(format!("covariance asymmetric by {asym:e}")));
        }
        let min = SymmetricEigen::new(m).eigenvalues.min();
        if min < -1e-8 {
            return Err(Error::invalid(format!("covariance has eigenvalue {min:e}")));
        }
        Ok(())
    }
}

/// Eigenvalues below this magnitude are treated as zero.
const EIGEN_CLAMP: f64 = 1e-10;

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig
        .eigenvalues
        .map(|v| if v < EIGEN_CLAMP { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa - μb‖² + Tr(Σa + Σb - 2 (Σa Σb)^½)`.
///
/// The trace of the cross term is computed from the symmetric product
/// `Σa^½ Σb Σa^½`, which has the same eigenvalues as `Σa Σb`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let dmean: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = a.matrix();
    let sb = b.matrix();
    let root_a = psd_sqrt(sa.clone());
    let mut product = &root_a * &sb * &root_a;
    product = (&product + product.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(product)
        .eigenvalues
        .iter()
        .map(|&v| if v < EIGEN_CLAMP { 0.0 } else { v.sqrt() })
        .sum();
    Ok((dmean + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedFrechet {
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

fn folds(set: &[Vec<f64>], k: usize, seed: Option<u64>) -> Vec<Vec<Vec<f64>>> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    if let Some(seed) = seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let size = set.len() / k;
    (0..k)
        .map(|f| {
            idx[f * size..(f + 1) * size]
                .iter()
                .map(|&i| set[i].clone())
                .collect()
        })
        .collect()
}

/// Fréchet distance averaged over `k` folds. Real fold `i` is compared with
/// generated fold `i + 1 (mod k)`, so no pair shares an index range. With a
/// seed both sets are shuffled before splitting.
pub fn folded_frechet(
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    k: usize,
    seed: Option<u64>,
) -> Result<FoldedFrechet> {
    if k < 2 {
        return Err(Error::invalid("folded distance needs at least two folds"));
    }
    let dim = real.first().map_or(0, Vec::len);
    let smallest = real.len().min(generated.len()) / k;
    if smallest < dim + 1 {
        return Err(Error::invalid(format!(
            "{smallest} samples per fold, need at least {}",
            dim + 1
        )));
    }
    let rf = folds(real, k, seed);
    let gf = folds(generated, k, seed.map(|s| s.wrapping_add(1)));
    let per_fold = (0..k)
        .map(|i| {
            frechet_distance(
                &FeatureStats::from_features(&rf[i])?,
                &FeatureStats::from_features(&gf[(i + 1) % k])?,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_fold.iter().sum::<f64>() / k as f64;
    let std = (per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
    Ok(FoldedFrechet {
        mean,
        std,
        per_fold,
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("feature lengths differ"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm feature"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of penultimate features of factual and counterfactual.
pub fn feature_similarity(pair: &EvalPair, clf: &dyn ImageClassifier) -> Result<f64> {
    let f = clf.features(&stack(&[&pair.factual, &pair.counterfactual])?)?;
    cosine_similarity(&f[0], &f[1])
}

/// Mean pairwise L2 distance between penultimate features of several runs.
pub fn diversity(runs: &[Tensor], clf: &dyn ImageClassifier) -> Result<f64> {
    if runs.len() < 2 {
        return Err(Error::invalid("diversity needs at least two runs"));
    }
    let feats = clf.features(&stack(&runs.iter().collect::<Vec<_>>())?)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            total += feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
