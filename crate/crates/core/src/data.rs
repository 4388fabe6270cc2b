//! Procedural blob images with known geometry.
//!
//! Each sample is a single textured disc on a dim noisy background. The
//! texture decides the class: sinusoidal stripes, a flat bright fill, or dark
//! spots. Because the disc is rasterized from recorded geometry, the exact
//! object mask of every sample is available without segmentation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::io::{encode_values, load_tensor, save_tensor, write_atomic, Dtype};
use crate::numerics::Tensor;
use crate::regions::RegionMask;

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassName {
    #[serde(rename = "striped-blob")]
    StripedBlob,
    #[serde(rename = "plain-blob")]
    PlainBlob,
    #[serde(rename = "spotted-blob")]
    SpottedBlob,
}

impl ClassName {
    pub const ALL: [ClassName; 3] = [
        ClassName::StripedBlob,
        ClassName::PlainBlob,
        ClassName::SpottedBlob,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassName::StripedBlob => "striped-blob",
            ClassName::PlainBlob => "plain-blob",
            ClassName::SpottedBlob => "spotted-blob",
        }
    }
}

impl fmt::Display for ClassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "striped-blob" => Ok(ClassName::StripedBlob),
            "plain-blob" => Ok(ClassName::PlainBlob),
            "spotted-blob" => Ok(ClassName::SpottedBlob),
            other => Err(Error::UnknownClass(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Stripes {
        period: f64,
        angle: f64,
        phase: f64,
        base: f64,
        amplitude: f64,
    },
    Plain {
        intensity: f64,
    },
    Spots {
        base: f64,
        dark: f64,
        radius: f64,
        centers: Vec<(f64, f64)>,
    },
}

/// Disc geometry in pixel coordinates; pixel `(y, x)` has its center at `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobGeometry {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub texture: Texture,
}

impl BlobGeometry {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center_x;
        let dy = y as f64 + 0.5 - self.center_y;
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// The object's pixels. Shared by image rendering and exact-object masks.
    pub fn rasterize(&self, height: usize, width: usize) -> RegionMask {
        RegionMask::from_fn(height, width, |y, x| self.contains(y, x))
    }

    fn shade(&self, y: usize, x: usize) -> f64 {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match &self.texture {
            Texture::Stripes {
                period,
                angle,
                phase,
                base,
                amplitude,
            } => {
                let u = px * angle.cos() + py * angle.sin();
                base + amplitude * (std::f64::consts::TAU * u / period + phase).sin()
            }
            Texture::Plain { intensity } => *intensity,
            Texture::Spots {
                base,
                dark,
                radius,
                centers,
            } => {
                let in_spot = centers.iter().any(|(cx, cy)| {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= radius * radius
                });
                if in_spot {
                    *dark
                } else {
                    *base
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub label: usize,
    pub class: ClassName,
    pub geometry: BlobGeometry,
}

impl SyntheticSample {
    /// The exact object region recorded by the generator.
    pub fn object_mask(&self) -> RegionMask {
        let s = self.image.shape();
        self.geometry.rasterize(s[1], s[2])
    }
}

pub fn generate_sample(class: ClassName, label: usize, rng: &mut impl Rng) -> SyntheticSample {
    let size = IMAGE_SIZE;
    let mid = size as f64 / 2.0;
    let radius = rng.gen_range(6.0..9.0);
    let center_x = mid + rng.gen_range(-3.0..3.0);
    let center_y = mid + rng.gen_range(-3.0..3.0);
    let texture = match class {
        ClassName::StripedBlob => Texture::Stripes {
            period: rng.gen_range(3.5..5.5),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            base: 0.35,
            amplitude: 0.3,
        },
        ClassName::PlainBlob => Texture::Plain {
            intensity: rng.gen_range(0.7..0.9),
        },
        ClassName::SpottedBlob => {
            let count = rng.gen_range(4..8);
            let centers = (0..count)
                .map(|_| {
                    let r = radius * rng.gen_range(0.0f64..0.85).sqrt();
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    (center_x + r * a.cos(), center_y + r * a.sin())
                })
                .collect();
            Texture::Spots {
                base: 0.75,
                dark: 0.15,
                radius: rng.gen_range(1.2..1.8),
                centers,
            }
        }
    };
    let geometry = BlobGeometry {
        center_x,
        center_y,
        radius,
        texture,
    };
    let background = rng.gen_range(0.05..0.2);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.gen_range(-0.05..0.05);
            let v = if geometry.contains(y, x) {
                geometry.shade(y, x)
            } else {
                background + noise
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    SyntheticSample {
        image: Tensor::from_parts(vec![1, size, size], data),
        label,
        class,
        geometry,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(classes: &[&str], per_class: usize, seed: u64) -> Self {
        Self {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            per_class,
            seed,
        }
    }

    /// The two-class striped/plain task.
    pub fn binary(per_class: usize, seed: u64) -> Self {
        Self::new(&["striped-blob", "plain-blob"], per_class, seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassName>,
    pub samples: Vec<SyntheticSample>,
}

/// Samples are interleaved by class; labels index into `spec.classes`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    let classes = spec
        .classes
        .iter()
        .map(|c| c.parse())
        .collect::<Result<Vec<ClassName>>>()?;
    if classes.is_empty() {
        return Err(Error::invalid("no classes requested"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(classes.len() * spec.per_class);
    for _ in 0..spec.per_class {
        for (label, &class) in classes.iter().enumerate() {
            samples.push(generate_sample(class, label, &mut rng));
        }
    }
    Ok(Dataset { classes, samples })
}

/// Deterministic single sample for dataset references such as
/// `{"class": "striped-blob", "index": 3, "seed": 0}`.
pub fn reference_sample(
    class: ClassName,
    label: usize,
    index: usize,
    seed: u64,
) -> SyntheticSample {
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_add((label as u64) << 40);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    generate_sample(class, label, &mut rng)
}

#[derive(Serialize, Deserialize)]
struct Labels {
    classes: Vec<ClassName>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn label_of(&self, class: ClassName) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// SHA-256 over the stored image payloads and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            h.update(encode_values(&s.image, Dtype::F32));
        }
        hex::encode(h.finalize())
    }

    /// Layout: `images/NNNNN.tensor` (+ sidecars), `labels.json`, `geometry.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            save_tensor(&images.join(format!("{i:05}.tensor")), &s.image, Dtype::F32)?;
        }
        let labels = Labels {
            classes: self.classes.clone(),
            labels: self.labels(),
        };
        write_atomic(
            &dir.join("labels.json"),
            &serde_json::to_vec_pretty(&labels)?,
        )?;
        let geometry: Vec<&BlobGeometry> = self.samples.iter().map(|s| &s.geometry).collect();
        write_atomic(
            &dir.join("geometry.json"),
            &serde_json::to_vec_pretty(&geometry)?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let labels: Labels = serde_json::from_slice(&read("labels.json")?)?;
        let geometry: Vec<BlobGeometry> = serde_json::from_slice(&read("geometry.json")?)?;
        if geometry.len() != labels.labels.len() {
            return Err(Error::MissingMetadata(format!(
                "{} labels but {} geometry records",
                labels.labels.len(),
                geometry.len()
            )));
        }
        let mut samples = Vec::with_capacity(geometry.len());
        for (i, (label, geometry)) in labels.labels.iter().zip(geometry).enumerate() {
            let class = *labels
                .classes
                .get(*label)
                .ok_or_else(|| Error::invalid(format!("label {label} has no class entry")))?;
            let image = load_tensor(&dir.join("images").join(format!("{i:05}.tensor")))?;
            samples.push(SyntheticSample {
                image,
                label: *label,
                class,
                geometry,
            });
        }
        Ok(Self {
            classes: labels.classes,
            samples,
        })
    }

    /// Deterministic split into `(train, held_out)` keeping the first `train` samples.
    pub fn split(&self, train: usize) -> (Dataset, Dataset) {
        let train = train.min(self.samples.len());
        (
            Dataset {
                classes: self.classes.clone(),
                samples: self.samples[..train].to_vec(),
            },
            Dataset {
                classes: self.classes.clone(),
                samples: self.samples[train..].to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_class_is_rejected() {
        let spec = DatasetSpec::new(&["striped-blob", "zebra"], 2, 0);
        assert!(matches!(generate_dataset(&spec), Err(Error::UnknownClass(c)) if c == "zebra"));
    }

    #[test]
    fn images_are_in_unit_range_and_object_inside() {
        let ds = generate_dataset(&DatasetSpec::new(
            &["striped-blob", "plain-blob", "spotted-blob"],
            20,
            3,
        ))
        .unwrap();
        for s in &ds.samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let g = &s.geometry;
            assert!(g.center_x - g.radius >= 0.0 && g.center_x + g.radius <= 32.0);
            assert!(g.center_y - g.radius >= 0.0 && g.center_y + g.radius <= 32.0);
        }
    }

    #[test]
    fn interleaved_labels() {
        let ds = generate_dataset(&DatasetSpec::binary(3, 1)).unwrap();
        assert_eq!(ds.labels(), vec![0, 1, 0, 1, 0, 1]);
    }
}
