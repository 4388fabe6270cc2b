use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{reference_sample, BlobGeometry, ClassName};
use crate::error::{Error, Result};
use crate::models::{ImageClassifier, Models};
use crate::numerics::io::{Dtype, TensorPayload};
use crate::numerics::{argmax, Tensor};
use crate::pipeline::{preset, Preset};
use crate::regions::{
    attribute, exact_object_mask, freeform_mask, grid_aggregate, threshold_region, AttributionMap,
    AttributionMethod, AttributionModel, CellGrid, RegionMask,
};
use crate::sampler::{sample_rcsb, GuidanceConfig, RunTelemetry};

/// A deterministic dataset image: `reference_sample(class, index, seed)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub class: String,
    pub index: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageInput {
    Tensor(TensorPayload),
    Reference(DatasetRef),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInput {
    /// Base64 single-channel PNG, 0 or 255 per pixel.
    Png(String),
    Tensor(TensorPayload),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSource {
    Manual {
        mask: MaskInput,
    },
    /// Attribution, grid aggregation and area thresholding. Missing values
    /// come from the preset; the method defaults to integrated gradients.
    Automated {
        #[serde(default)]
        a: Option<f64>,
        #[serde(default)]
        c: Option<usize>,
        #[serde(default)]
        method: Option<String>,
    },
    ExactObject,
    Freeform {
        lo: f64,
        hi: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl RegionSource {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Manual { .. } => "manual",
            Self::Automated { .. } => "automated",
            Self::ExactObject => "exact_object",
            Self::Freeform { .. } => "freeform",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetClass {
    Index(usize),
    Name(String),
}

impl TargetClass {
    pub fn resolve(&self, models: &Models) -> Result<usize> {
        match self {
            Self::Index(i) if *i < models.classifier.arch().classes => Ok(*i),
            Self::Index(i) => Err(Error::invalid(format!("class index {i} out of range"))),
            Self::Name(name) => models.class_index(name),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub s: Option<f64>,
    pub tau: Option<f64>,
    #[serde(rename = "N")]
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub adaptive_norm: Option<bool>,
    pub project_region: Option<bool>,
    pub posterior_alpha: Option<f64>,
    pub adam_lr: Option<f64>,
}

impl ConfigOverrides {
    pub fn apply(&self, preset: &Preset) -> Result<GuidanceConfig> {
        let mut cfg = GuidanceConfig {
            s: preset.s,
            tau: preset.tau,
            ..GuidanceConfig::default()
        };
        if let Some(v) = self.s {
            cfg.s = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.adaptive_norm {
            cfg.adaptive_norm = v;
        }
        if let Some(v) = self.project_region {
            cfg.project_region = v;
        }
        if let Some(v) = self.posterior_alpha {
            cfg.posterior_alpha = v;
        }
        if let Some(v) = self.adam_lr {
            cfg.adam.lr = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub image: ImageInput,
    pub region: RegionSource,
    pub target: TargetClass,
    /// `A`, `B` or `C`; `A` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub config: ConfigOverrides,
}

/// A request with every input resolved.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub image: Tensor,
    pub mask: RegionMask,
    pub target: usize,
    /// Class the classifier assigns to the factual image.
    pub source: usize,
    pub preset: Preset,
    pub config: GuidanceConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFingerprints {
    pub score: String,
    pub classifier: String,
}

impl ModelFingerprints {
    pub fn of(models: &Models) -> Self {
        Self {
            score: models.score_manifest.fingerprint.clone(),
            classifier: models.classifier_manifest.fingerprint.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRun {
    pub id: String,
    pub request: ExplainRequest,
    pub preset: String,
    pub config: GuidanceConfig,
    pub target: usize,
    pub target_name: String,
    pub source: usize,
    pub source_name: String,
    pub region_kind: String,
    pub region_area: f64,
    pub input: TensorPayload,
    pub region: TensorPayload,
    pub output: TensorPayload,
    pub telemetry: RunTelemetry,
    pub flipped: bool,
    /// `f(target | output)`.
    pub target_prob: f64,
    pub created_unix: u64,
    pub models: ModelFingerprints,
}

impl ExplainRun {
    pub fn output_tensor(&self) -> Result<Tensor> {
        self.output.decode()
    }

    pub fn input_tensor(&self) -> Result<Tensor> {
        self.input.decode()
    }

    pub fn region_mask(&self) -> Result<RegionMask> {
        RegionMask::from_tensor(&self.region.decode()?)
    }
}

fn resolve_image(input: &ImageInput, models: &Models) -> Result<(Tensor, Option<BlobGeometry>)> {
    match input {
        ImageInput::Tensor(payload) => {
            let mut t = payload.decode()?;
            if t.shape().len() == 2 {
                let s = [1, t.shape()[0], t.shape()[1]];
                t = t.reshape(&s)?;
            }
            let channels = models.classifier.arch().image_channels;
            if t.shape().len() != 3 || t.shape()[0] != channels {
                return Err(Error::invalid(format!(
                    "image must be [{channels}, H, W], got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invalid("image contains non-finite values"));
            }
            Ok((t, None))
        }
        ImageInput::Reference(r) => {
            let class: ClassName = r.class.parse()?;
            let label = models.class_index(class.as_str())?;
            let sample = reference_sample(class, label, r.index, r.seed);
            Ok((sample.image, Some(sample.geometry)))
        }
    }
}

fn resolve_mask(input: &MaskInput, h: usize, w: usize) -> Result<RegionMask> {
    let mask = match input {
        MaskInput::Png(b64) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Error::invalid(format!("mask is not base64: {e}")))?;
            RegionMask::from_png(&bytes)?
        }
        MaskInput::Tensor(payload) => {
            let t = payload.decode()?;
            let t = match t.shape() {
                &[mh, mw] => t.reshape(&[1, mh, mw])?,
                _ => t,
            };
            RegionMask::from_tensor(&t)?
        }
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "mask is {}x{}, image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(mask)
}

/// Automated region: attribution for the predicted class, grid sums, top cells.
pub(crate) fn automated_region(
    models: &Models,
    image: &Tensor,
    class: usize,
    a: f64,
    c: usize,
    method: AttributionMethod,
) -> Result<(AttributionMap, CellGrid, RegionMask)> {
    let map = attribute(method, &models.classifier, image, class)?;
    let cells = grid_aggregate(&map, c)?;
    let mask = threshold_region(&cells, a)?;
    Ok((map, cells, mask))
}

pub fn prepare(models: &Models, request: &ExplainRequest) -> Result<PreparedRun> {
    let preset = preset(request.preset.as_deref().unwrap_or("A"))?;
    let config = request.config.apply(&preset)?;
    let (image, geometry) = resolve_image(&request.image, models)?;
    let target = request.target.resolve(models)?;
    let source = models.classifier.predict(&image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mask = match &request.region {
        RegionSource::Manual { mask } => resolve_mask(mask, h, w)?,
        RegionSource::Automated { a, c, method } => {
            let method: AttributionMethod = method
                .as_deref()
                .unwrap_or("integrated_gradients")
                .parse()?;
            automated_region(
                models,
                &image,
                source,
                a.unwrap_or(preset.a),
                c.unwrap_or(preset.c),
                method,
            )?
            .2
        }
        RegionSource::ExactObject => exact_object_mask(geometry.as_ref(), h, w)?,
        RegionSource::Freeform { lo, hi, seed } => {
            freeform_mask(&mut ChaCha8Rng::seed_from_u64(*seed), h, w, (*lo, *hi))?
        }
    };
    if mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(PreparedRun {
        image,
        mask,
        target,
        source,
        preset,
        config,
    })
}

/// Content address of a run: the request, the resolved configuration and
/// the model fingerprints.
fn run_id(
    request: &ExplainRequest,
    config: &GuidanceConfig,
    models: &ModelFingerprints,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(request)?);
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(models)?);
    Ok(hex::encode(h.finalize())[..24].to_string())
}

/// Resolves and runs one explanation.
pub fn execute(models: &Models, request: &ExplainRequest) -> Result<ExplainRun> {
    let prepared = prepare(models, request)?;
    let (output, telemetry) = sample_rcsb(
        &models.score,
        &models.classifier,
        models.schedule.beta,
        &prepared.image,
        &prepared.mask,
        prepared.target,
        &prepared.config,
    )?;
    let probs = models.classifier.probs(&output.batched())?.remove(0);
    let fingerprints = ModelFingerprints::of(models);
    let name = |i: usize| {
        models
            .classes()
            .get(i)
            .cloned()
            .unwrap_or_else(|| i.to_string())
    };
    Ok(ExplainRun {
        id: run_id(request, &prepared.config, &fingerprints)?,
        request: request.clone(),
        preset: prepared.preset.name.to_string(),
        config: prepared.config.clone(),
        target: prepared.target,
        target_name: name(prepared.target),
        source: prepared.source,
        source_name: name(prepared.source),
        region_kind: request.region.kind().to_string(),
        region_area: prepared.mask.area_fraction(),
        input: TensorPayload::encode(&prepared.image, Dtype::F64),
        region: TensorPayload::encode(&prepared.mask.to_tensor(), Dtype::F32),
        output: TensorPayload::encode(&output, Dtype::F64),
        telemetry,
        flipped: argmax(&probs) == prepared.target,
        target_prob: probs[prepared.target],
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        models: fingerprints,
    })
}

fn default_method() -> String {
    "integrated_gradients".to_string()
}

fn default_a() -> f64 {
    0.1
}

fn default_c() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRequest {
    pub image: ImageInput,
    /// Class to explain; the predicted class when absent.
    #[serde(default)]
    pub class: Option<TargetClass>,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_c")]
    pub c: usize,
    /// Integration steps for integrated gradients.
    #[serde(default)]
    pub steps: Option<usize>,
}

/// Integrated-gradients bookkeeping: attributions should sum to the gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    pub attribution_sum: f64,
    /// `log f(class | x) - log f(class | 0)`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub class: usize,
    pub method: String,
    pub map: AttributionMap,
    pub cells: CellGrid,
    pub mask: TensorPayload,
    pub mask_png: String,
    pub area_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completeness: Option<Completeness>,
}

pub fn attribute_request(models: &Models, request: &AttributeRequest) -> Result<AttributeResponse> {
    let (image, _) = resolve_image(&request.image, models)?;
    let class = match &request.class {
        Some(c) => c.resolve(models)?,
        None => models.classifier.predict(&image)?,
    };
    let mut method: AttributionMethod = request.method.parse()?;
    if let (AttributionMethod::IntegratedGradients { steps }, Some(m)) =
        (&mut method, request.steps)
    {
        *steps = m;
    }
    let (map, cells, mask) = automated_region(models, &image, class, request.a, request.c, method)?;
    let completeness = match method {
        AttributionMethod::IntegratedGradients { .. } => {
            let batch = Tensor::stack(&[&image, &Tensor::zeros(image.shape())])?;
            let v = models.classifier.value(&batch, class)?;
            Some(Completeness {
                attribution_sum: map.total(),
                gap: v[0] - v[1],
            })
        }
        _ => None,
    };
    Ok(AttributeResponse {
        class,
        method: method.name().to_string(),
        area_fraction: mask.area_fraction(),
        mask: TensorPayload::encode(&mask.to_tensor(), Dtype::F32),
        mask_png: base64::engine::general_purpose::STANDARD.encode(mask.to_png()?),
        map,
        cells,
        completeness,
    })
}
