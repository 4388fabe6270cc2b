use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Classifier, ClassifierArch, Params, ScoreArch, ScoreNetwork};
use crate::numerics::io::{load_tensor, save_tensor, write_atomic, Dtype};
use crate::schedule::{BridgeSchedule, ScheduleSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Score,
    Classifier,
}

/// `manifest.json` of a model bundle directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub kind: ModelKind,
    pub architecture: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    pub dataset_fingerprint: String,
    pub seed: u64,
    /// Class names in label order.
    pub classes: Vec<String>,
    /// SHA-256 over parameter names, shapes and values.
    pub fingerprint: String,
    pub parameters: Vec<String>,
}

/// Stable content hash of a parameter map.
pub fn params_fingerprint(params: &Params) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        h.update([0]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn save_params(dir: &Path, params: &Params) -> Result<()> {
    let weights = dir.join("weights");
    fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    for (name, t) in params {
        save_tensor(&weights.join(format!("{name}.tensor")), t, Dtype::F64)?;
    }
    Ok(())
}

fn load_params(dir: &Path, names: &[String]) -> Result<Params> {
    let weights = dir.join("weights");
    names
        .iter()
        .map(|n| {
            Ok((
                n.clone(),
                load_tensor(&weights.join(format!("{n}.tensor")))?,
            ))
        })
        .collect()
}

fn write_manifest(dir: &Path, manifest: &BundleManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn expect_kind(manifest: &BundleManifest, kind: ModelKind, dir: &Path) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::invalid(format!(
            "{} holds a {:?} bundle, expected {kind:?}",
            dir.display(),
            manifest.kind
        )));
    }
    Ok(())
}

fn check_fingerprint(manifest: &BundleManifest, params: &Params, dir: &Path) -> Result<()> {
    let actual = params_fingerprint(params);
    if actual != manifest.fingerprint {
        return Err(Error::CorruptTensor {
            path: dir.join("weights"),
            reason: format!(
                "fingerprint {actual} does not match manifest {}",
                manifest.fingerprint
            ),
        });
    }
    Ok(())
}

impl BundleManifest {
    pub fn for_score(
        net: &ScoreNetwork,
        schedule: &ScheduleSpec,
        dataset_fingerprint: &str,
        seed: u64,
        classes: &[String],
    ) -> Result<Self> {
        Ok(Self {
            kind: ModelKind::Score,
            architecture: serde_json::to_value(net.arch())?,
            schedule: Some(*schedule),
            dataset_fingerprint: dataset_fingerprint.to_string(),
            seed,
            classes: classes.to_vec(),
            fingerprint: params_fingerprint(net.params()),
            parameters: net.params().keys().cloned().collect(),
        })
    }

    pub fn for_classifier(
        clf: &Classifier,
        dataset_fingerprint: &str,
        seed: u64,
        classes: &[String],
    ) -> Result<Self> {
        Ok(Self {
            kind: ModelKind::Classifier,
            architecture: serde_json::to_value(clf.arch())?,
            schedule: None,
            dataset_fingerprint: dataset_fingerprint.to_string(),
            seed,
            classes: classes.to_vec(),
            fingerprint: params_fingerprint(clf.params()),
            parameters: clf.params().keys().cloned().collect(),
        })
    }
}

pub fn save_score_bundle(dir: &Path, net: &ScoreNetwork, manifest: &BundleManifest) -> Result<()> {
    expect_kind(manifest, ModelKind::Score, dir)?;
    save_params(dir, net.params())?;
    write_manifest(dir, manifest)
}

pub fn save_classifier_bundle(
    dir: &Path,
    clf: &Classifier,
    manifest: &BundleManifest,
) -> Result<()> {
    expect_kind(manifest, ModelKind::Classifier, dir)?;
    save_params(dir, clf.params())?;
    write_manifest(dir, manifest)
}

pub fn load_score_bundle(dir: &Path) -> Result<(ScoreNetwork, BundleManifest)> {
    let manifest = read_manifest(dir)?;
    expect_kind(&manifest, ModelKind::Score, dir)?;
    let arch: ScoreArch = serde_json::from_value(manifest.architecture.clone())?;
    let params = load_params(dir, &manifest.parameters)?;
    check_fingerprint(&manifest, &params, dir)?;
    Ok((ScoreNetwork::from_params(arch, params)?, manifest))
}

pub fn load_classifier_bundle(dir: &Path) -> Result<(Classifier, BundleManifest)> {
    let manifest = read_manifest(dir)?;
    expect_kind(&manifest, ModelKind::Classifier, dir)?;
    let arch: ClassifierArch = serde_json::from_value(manifest.architecture.clone())?;
    let params = load_params(dir, &manifest.parameters)?;
    check_fingerprint(&manifest, &params, dir)?;
    Ok((Classifier::from_params(arch, params)?, manifest))
}

/// A score network and a classifier ready for explanation runs.
#[derive(Clone, Debug)]
pub struct Models {
    pub score: ScoreNetwork,
    pub classifier: Classifier,
    pub schedule: ScheduleSpec,
    pub score_manifest: BundleManifest,
    pub classifier_manifest: BundleManifest,
}

impl Models {
    pub fn classes(&self) -> &[String] {
        &self.classifier_manifest.classes
    }

    /// Label index of a class name.
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn bridge_schedule(&self) -> Result<BridgeSchedule> {
        BridgeSchedule::from_spec(&self.schedule)
    }

    /// Writes `score/` and `classifier/` bundles under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_score_bundle(&dir.join("score"), &self.score, &self.score_manifest)?;
        save_classifier_bundle(
            &dir.join("classifier"),
            &self.classifier,
            &self.classifier_manifest,
        )
    }
}

/// Loads the `score/` and `classifier/` bundles under `dir`.
pub fn load_models(dir: &Path) -> Result<Models> {
    let (score, score_manifest) = load_score_bundle(&dir.join("score"))?;
    let (classifier, classifier_manifest) = load_classifier_bundle(&dir.join("classifier"))?;
    let schedule = score_manifest
        .schedule
        .ok_or_else(|| Error::MissingMetadata("schedule in score manifest".into()))?;
    Ok(Models {
        score,
        classifier,
        schedule,
        score_manifest,
        classifier_manifest,
    })
}
