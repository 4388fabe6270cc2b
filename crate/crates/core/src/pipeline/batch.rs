use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, ClassName, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    cout, diversity, feature_similarity, flip_rate, folded_frechet, frechet_distance, CoutConfig,
    EvalPair, FeatureStats, FoldedFrechet,
};
use crate::models::{ImageClassifier, Models};
use crate::numerics::io::{load_tensor, save_tensor, write_atomic, Dtype, TensorPayload};
use crate::numerics::Tensor;
use crate::pipeline::{
    execute, ConfigOverrides, ExplainRequest, ImageInput, RegionSource, RunStore, TargetClass,
};

/// Explains every correctly classified image of one class toward another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub dataset: DatasetSpec,
    pub source: String,
    pub target: String,
    pub preset: String,
    pub method: String,
    /// Stop after this many selected images.
    pub limit: Option<usize>,
    /// Runs per image; repeats differ only in seed.
    pub repeats: usize,
    /// Seed of the first run; later runs count up from it.
    pub seed: u64,
    pub config: ConfigOverrides,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::binary(100, 1),
            source: "striped-blob".into(),
            target: "plain-blob".into(),
            preset: "A".into(),
            method: "integrated_gradients".into(),
            limit: None,
            repeats: 1,
            seed: 0,
            config: ConfigOverrides::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub image: usize,
    pub repeat: usize,
    pub run_id: String,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub spec: BatchSpec,
    pub candidates: usize,
    pub selected: usize,
    pub runs: Vec<BatchEntry>,
}

/// Runs the batch, writing `factual/NNNNN.tensor`,
/// `counterfactual/NNNNN_R.tensor` and `batch.json` under `out`.
pub fn explain_batch(
    models: &Models,
    spec: &BatchSpec,
    store: Option<&RunStore>,
    out: &Path,
) -> Result<BatchSummary> {
    if spec.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let source: ClassName = spec.source.parse()?;
    let data = generate_dataset(&spec.dataset)?;
    let label = data
        .label_of(source)
        .ok_or_else(|| Error::invalid(format!("dataset has no class {source}")))?;
    let candidates: Vec<&Tensor> = data
        .samples
        .iter()
        .filter(|s| s.label == label)
        .map(|s| &s.image)
        .collect();
    let source_index = models.class_index(source.as_str())?;
    let mut selected = Vec::new();
    for image in &candidates {
        if models.classifier.predict(image)? == source_index {
            selected.push(*image);
        }
        if spec.limit.is_some_and(|l| selected.len() >= l) {
            break;
        }
    }

    let factual_dir = out.join("factual");
    let cf_dir = out.join("counterfactual");
    for d in [&factual_dir, &cf_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut runs = Vec::new();
    for (i, image) in selected.iter().enumerate() {
        save_tensor(
            &factual_dir.join(format!("{i:05}.tensor")),
            image,
            Dtype::F64,
        )?;
        for r in 0..spec.repeats {
            let mut config = spec.config.clone();
            config.seed = Some(spec.seed + (i * spec.repeats + r) as u64);
            let request = ExplainRequest {
                image: ImageInput::Tensor(TensorPayload::encode(image, Dtype::F64)),
                region: RegionSource::Automated {
                    a: None,
                    c: None,
                    method: Some(spec.method.clone()),
                },
                target: TargetClass::Name(spec.target.clone()),
                preset: Some(spec.preset.clone()),
                config,
            };
            let run = execute(models, &request)?;
            if let Some(store) = store {
                store.save(&run)?;
            }
            save_tensor(
                &cf_dir.join(format!("{i:05}_{r}.tensor")),
                &run.output_tensor()?,
                Dtype::F64,
            )?;
            runs.push(BatchEntry {
                image: i,
                repeat: r,
                run_id: run.id,
                flipped: run.flipped,
            });
        }
        if (i + 1) % 10 == 0 {
            log::info!("explained {}/{} images", i + 1, selected.len());
        }
    }
    let summary = BatchSummary {
        spec: spec.clone(),
        candidates: candidates.len(),
        selected: selected.len(),
        runs,
    };
    write_atomic(
        &out.join("batch.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub factual_dir: PathBuf,
    pub counterfactual_dir: PathBuf,
    pub target: String,
    /// Class of the factuals; the classifier's prediction when absent.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub cout: CoutConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold_seed: Option<u64>,
}

fn default_folds() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub flip_rate: f64,
    pub cout_mean: f64,
    pub cout_std: f64,
    /// Fréchet distance between classifier features of factuals and counterfactuals.
    pub fid: f64,
    /// Folded Fréchet distance; absent when folds are too small.
    pub sfid: Option<FoldedFrechet>,
    /// Cosine similarity of classifier features, standing in for a
    /// self-supervised similarity score.
    pub s3_substitute: f64,
    /// Mean pairwise feature distance between repeats of the same image,
    /// standing in for a perceptual diversity score. Absent without repeats.
    pub diversity_substitute: Option<f64>,
    pub config: serde_json::Value,
}

fn tensor_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "tensor") {
            let stem = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics over a directory of factuals and one of counterfactuals. A
/// counterfactual `NNNNN_R.tensor` (or `NNNNN.tensor`) pairs with factual
/// `NNNNN.tensor`.
pub fn eval_dirs(models: &Models, spec: &EvalSpec) -> Result<EvalReport> {
    let clf = &models.classifier;
    let target = models.class_index(&spec.target)?;
    let fixed_source = spec
        .source
        .as_deref()
        .map(|s| models.class_index(s))
        .transpose()?;

    let mut factuals = BTreeMap::new();
    for (stem, path) in tensor_files(&spec.factual_dir)? {
        factuals.insert(stem, load_tensor(&path)?);
    }
    let mut groups: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for (stem, path) in tensor_files(&spec.counterfactual_dir)? {
        let key = stem.split('_').next().unwrap_or(&stem).to_string();
        if !factuals.contains_key(&key) {
            return Err(Error::MissingMetadata(format!(
                "no factual for counterfactual {stem}"
            )));
        }
        groups.entry(key).or_default().push(load_tensor(&path)?);
    }
    let mut pairs = Vec::new();
    for (key, cfs) in &groups {
        let factual = &factuals[key];
        let source = match fixed_source {
            Some(s) => s,
            None => clf.predict(factual)?,
        };
        for cf in cfs {
            pairs.push(EvalPair::new(factual.clone(), cf.clone(), target, source)?);
        }
    }
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "evaluation needs at least two pairs, found {}",
            pairs.len()
        )));
    }

    let fr = flip_rate(&pairs, clf)?;
    let couts = pairs
        .iter()
        .map(|p| cout(p, clf, &spec.cout))
        .collect::<Result<Vec<_>>>()?;
    let (cout_mean, cout_std) = mean_std(&couts);
    let sims = pairs
        .iter()
        .map(|p| feature_similarity(p, clf))
        .collect::<Result<Vec<_>>>()?;

    let feats = |images: Vec<&Tensor>| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in images.chunks(64) {
            out.extend(clf.features(&Tensor::stack(chunk)?)?);
        }
        Ok(out)
    };
    let real = feats(pairs.iter().map(|p| &p.factual).collect())?;
    let generated = feats(pairs.iter().map(|p| &p.counterfactual).collect())?;
    let fid = frechet_distance(
        &FeatureStats::from_features(&real)?,
        &FeatureStats::from_features(&generated)?,
    )?;
    let sfid = folded_frechet(&real, &generated, spec.folds, spec.fold_seed).ok();

    let repeated: Vec<f64> = groups
        .values()
        .filter(|g| g.len() >= 2)
        .map(|g| diversity(g, clf))
        .collect::<Result<_>>()?;
    let diversity_substitute = (!repeated.is_empty()).then(|| mean_std(&repeated).0);

    let config = fs::read(spec.counterfactual_dir.join("..").join("batch.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v.get("spec").cloned())
        .unwrap_or(serde_json::Value::Null);

    Ok(EvalReport {
        pairs: pairs.len(),
        flip_rate: fr,
        cout_mean,
        cout_std,
        fid,
        sfid,
        s3_substitute: mean_std(&sims).0,
        diversity_substitute,
        config: serde_json::json!({ "eval": spec, "batch": config }),
    })
}
