//! Orchestration shared by the command line and the HTTP service: presets,
//! model recipes, explanation requests, run persistence, batch runs and
//! evaluation reports.

mod batch;
mod request;
mod store;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::models::{
    load_models, score_loss, train_classifier, train_score, BundleManifest, Classifier,
    ClassifierArch, ImageClassifier, MixedMasks, Models, ScoreArch, ScoreNetwork, ScoreTrainConfig,
    TrainConfig,
};
use crate::schedule::ScheduleSpec;

pub use batch::{eval_dirs, explain_batch, BatchSpec, BatchSummary, EvalReport, EvalSpec};
pub use request::{
    attribute_request, execute, prepare, AttributeRequest, AttributeResponse, ConfigOverrides,
    DatasetRef, ExplainRequest, ExplainRun, ImageInput, MaskInput, ModelFingerprints, PreparedRun,
    RegionSource, TargetClass,
};
pub use store::RunStore;

/// Named hyperparameter sets: area fraction `a`, cell size `c`, guidance
/// scale `s` and truncation `tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: &'static str,
    pub a: f64,
    pub c: usize,
    pub s: f64,
    pub tau: f64,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "A",
        a: 0.1,
        c: 4,
        s: 3.0,
        tau: 0.6,
    },
    Preset {
        name: "B",
        a: 0.2,
        c: 4,
        s: 1.5,
        tau: 0.6,
    },
    Preset {
        name: "C",
        a: 0.3,
        c: 4,
        s: 1.5,
        tau: 0.6,
    },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| Error::invalid(format!("unknown preset `{name}`, expected A, B or C")))
}

/// Everything needed to reproduce a trained model pair from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub dataset: DatasetSpec,
    /// Samples used for training; the rest are held out.
    pub train_samples: usize,
    pub classifier_arch: ClassifierArch,
    pub classifier: TrainConfig,
    pub classifier_seed: u64,
    pub score_arch: ScoreArch,
    pub score: ScoreTrainConfig,
    pub score_seed: u64,
    pub schedule: ScheduleSpec,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::binary(400, 0),
            train_samples: 640,
            classifier_arch: ClassifierArch::default(),
            classifier: TrainConfig::default(),
            classifier_seed: 1,
            score_arch: ScoreArch::default(),
            score: ScoreTrainConfig::default(),
            score_seed: 2,
            schedule: ScheduleSpec::default(),
        }
    }
}

/// Held-out figures recorded when a recipe is trained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub classifier_accuracy: f64,
    pub score_loss_initial: f64,
    pub score_loss_final: f64,
    pub held_out: usize,
}

impl TrainRecipe {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("recipe serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    fn data(&self) -> Result<(Dataset, Dataset, String, Vec<String>)> {
        let data = generate_dataset(&self.dataset)?;
        let (train, held_out) = data.split(self.train_samples);
        if train.is_empty() || held_out.is_empty() {
            return Err(Error::invalid(
                "recipe must leave both training and held-out samples",
            ));
        }
        let classes = data.classes.iter().map(|c| c.to_string()).collect();
        Ok((train, held_out, data.fingerprint(), classes))
    }

    /// Trains the classifier; also returns its held-out accuracy.
    pub fn train_classifier(&self) -> Result<(Classifier, BundleManifest, f64)> {
        let (train, held_out, fingerprint, classes) = self.data()?;
        log::info!("training classifier on {} samples", train.len());
        let clf = Classifier::new(self.classifier_arch.clone(), self.classifier_seed);
        let (clf, _) = train_classifier(clf, &train, &self.classifier)?;
        let correct = held_out
            .samples
            .iter()
            .filter(|s| clf.predict(&s.image).ok() == Some(s.label))
            .count();
        let manifest =
            BundleManifest::for_classifier(&clf, &fingerprint, self.classifier_seed, &classes)?;
        Ok((clf, manifest, correct as f64 / held_out.len() as f64))
    }

    /// Trains the score network; also returns the held-out loss before and after.
    pub fn train_score(&self) -> Result<(ScoreNetwork, BundleManifest, (f64, f64))> {
        let (train, held_out, fingerprint, classes) = self.data()?;
        log::info!(
            "training score network for {} steps",
            self.score.train.steps
        );
        let masks = MixedMasks::default();
        let net = ScoreNetwork::new(self.score_arch.clone(), self.score_seed);
        let probe = &held_out.samples[..held_out.len().min(64)];
        let before = score_loss(&net, probe, &masks, self.score.bridge_alpha, 7)?;
        let (net, _) = train_score(net, &train, &masks, &self.score)?;
        let after = score_loss(&net, probe, &masks, self.score.bridge_alpha, 7)?;
        let manifest = BundleManifest::for_score(
            &net,
            &self.schedule,
            &fingerprint,
            self.score_seed,
            &classes,
        )?;
        Ok((net, manifest, (before, after)))
    }

    /// Trains both models and reports held-out quality.
    pub fn train(&self) -> Result<(Models, TrainSummary)> {
        let (classifier, classifier_manifest, accuracy) = self.train_classifier()?;
        let (score, score_manifest, (before, after)) = self.train_score()?;
        let held_out = self.dataset.per_class * self.dataset.classes.len() - self.train_samples;
        Ok((
            Models {
                score,
                classifier,
                schedule: self.schedule,
                score_manifest,
                classifier_manifest,
            },
            TrainSummary {
                classifier_accuracy: accuracy,
                score_loss_initial: before,
                score_loss_final: after,
                held_out,
            },
        ))
    }

    /// Loads the models trained from this recipe out of `cache`, training and
    /// storing them first when absent.
    pub fn load_or_train(&self, cache: &Path) -> Result<(Models, TrainSummary)> {
        let dir = cache.join(format!("bridgelab-models-{}", self.fingerprint()));
        let summary_path = dir.join("summary.json");
        if let Ok(bytes) = fs::read(&summary_path) {
            if let (Ok(models), Ok(summary)) = (load_models(&dir), serde_json::from_slice(&bytes)) {
                return Ok((models, summary));
            }
        }
        let (models, summary) = self.train()?;
        let staging = cache.join(format!(
            ".bridgelab-staging-{}-{}",
            self.fingerprint(),
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&staging);
        models.save(&staging)?;
        fs::write(
            staging.join("summary.json"),
            serde_json::to_vec_pretty(&summary)?,
        )
        .map_err(|e| Error::io(&staging, e))?;
        if fs::rename(&staging, &dir).is_err() {
            // Another process finished first; its bundle is equivalent.
            let _ = fs::remove_dir_all(&staging);
        }
        Ok((models, summary))
    }
}
