//! The score network, the classifier under explanation, and their training.

mod bundle;
mod classifier;
mod guided;
mod score;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Bindings, Graph, NodeId, Tensor};

pub use bundle::{
    load_classifier_bundle, load_models, load_score_bundle, params_fingerprint, read_manifest,
    save_classifier_bundle, save_score_bundle, BundleManifest, ModelKind, Models,
};
pub use classifier::{Classifier, ClassifierArch, ImageClassifier};
pub use guided::{GuidanceEval, GuidedPair};
pub use score::{
    score_to_tweedie, time_features, tweedie_to_score, Denoiser, ScoreArch, ScoreNetwork,
};
pub use train::{
    score_loss, train_classifier, train_score, MaskSampler, MixedMasks, ScoreTrainConfig,
    TrainConfig, TrainReport,
};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply(self, graph: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => graph.relu(x),
            Activation::Gelu => graph.gelu(x),
        }
    }
}

/// Named parameter tensors in a stable order.
pub type Params = BTreeMap<String, Tensor>;

pub(crate) fn bind_params<'a>(params: &'a Params, bindings: &mut Bindings<'a>) {
    for (name, t) in params {
        bindings.bind_ref(name.clone(), t);
    }
}

/// He-normal initialization for a weight with `fan_in` inputs.
pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn params_finite(params: &Params) -> bool {
    params.values().all(Tensor::is_finite)
}
