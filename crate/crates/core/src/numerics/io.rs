//! Tensor files and PNG export.
//!
//! A tensor is stored as a raw little-endian payload (`name.tensor`) next to
//! a JSON sidecar (`name.tensor.json`) of the form
//! `{"dtype": "f32", "shape": [1, 32, 32], "layout": "row-major"}`.
//! `f32` is the default storage type; `f64` is accepted for values that must
//! survive a round trip bit-exactly (model weights).

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub layout: String,
}

impl TensorHeader {
    fn validate(&self) -> std::result::Result<usize, String> {
        if self.layout != "row-major" {
            return Err(format!("unsupported layout `{}`", self.layout));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(format!("invalid shape {:?}", self.shape));
        }
        Ok(self.shape.iter().product())
    }
}

/// Tensor as carried inside JSON documents: header fields plus base64 payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorPayload {
    #[serde(default)]
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    #[serde(default = "row_major")]
    pub layout: String,
    pub data: String,
}

fn row_major() -> String {
    "row-major".to_string()
}

impl TensorPayload {
    pub fn encode(tensor: &Tensor, dtype: Dtype) -> Self {
        Self {
            dtype,
            shape: tensor.shape().to_vec(),
            layout: row_major(),
            data: base64::engine::general_purpose::STANDARD.encode(encode_values(tensor, dtype)),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::invalid(format!("tensor payload is not base64: {e}")))?;
        let header = TensorHeader {
            dtype: self.dtype,
            shape: self.shape.clone(),
            layout: self.layout.clone(),
        };
        decode_values(&header, &bytes).map_err(Error::InvalidArgument)
    }
}

pub fn encode_values(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor.numel() * dtype.width());
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode_values(header: &TensorHeader, bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let numel = header.validate()?;
    let width = header.dtype.width();
    if bytes.len() != numel * width {
        return Err(format!(
            "payload has {} bytes, expected {} for shape {:?}",
            bytes.len(),
            numel * width,
            header.shape
        ));
    }
    let data = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::from_parts(header.shape.clone(), data))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `path` and its sidecar. Each file is written to a temporary name
/// and renamed into place.
pub fn save_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let header = TensorHeader {
        dtype,
        shape: tensor.shape().to_vec(),
        layout: row_major(),
    };
    header.validate().map_err(Error::InvalidArgument)?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec(&header)?)?;
    write_atomic(path, &encode_values(tensor, dtype))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let sidecar = sidecar_path(path);
    let header_bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: TensorHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::CorruptTensor {
            path: sidecar.clone(),
            reason: e.to_string(),
        })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_values(&header, &bytes).map_err(|reason| Error::CorruptTensor {
        path: path.to_path_buf(),
        reason,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[C, H, W]` image (C = 1 or 3) as an 8-bit PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        &[h, w] => (1, h, w),
        s => {
            return Err(Error::invalid(format!(
                "PNG export needs [1|3, H, W], got {s:?}"
            )))
        }
    };
    let hw = h * w;
    let data = image.data();
    let mut bytes = Vec::new();
    let mut cursor = Cursor::new(&mut bytes);
    if c == 1 {
        let pixels: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, pixels)
            .expect("buffer sized")
            .write_to(&mut cursor, image::ImageFormat::Png)?;
    } else {
        let mut pixels = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for ch in 0..3 {
                pixels.push(quantize(data[ch * hw + i]));
            }
        }
        image::RgbImage::from_raw(w as u32, h as u32, pixels)
            .expect("buffer sized")
            .write_to(&mut cursor, image::ImageFormat::Png)?;
    }
    Ok(bytes)
}

/// Decodes an 8-bit PNG into a `[C, H, W]` tensor with values in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                data[ch * hw + i] = px.0[ch] as f64 / 255.0;
            }
        }
        Ok(Tensor::from_parts(vec![3, h, w], data))
    } else {
        let gray = img.to_luma8();
        let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(Tensor::from_parts(vec![1, h, w], data))
    }
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tensor");
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        save_tensor(&path, &t, Dtype::F32).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(Error::CorruptTensor { .. })
        ));
    }

    #[test]
    fn corrupt_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tensor");
        save_tensor(&path, &Tensor::scalar(1.0), Dtype::F32).unwrap();
        fs::write(sidecar_path(&path), b"{\"dtype\": \"f16\"}").unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(Error::CorruptTensor { .. })
        ));
    }

    #[test]
    fn sidecar_matches_documented_form() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.tensor");
        save_tensor(&path, &Tensor::zeros(&[1, 2, 2]), Dtype::F32).unwrap();
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"dtype": "f32", "shape": [1, 2, 2], "layout": "row-major"})
        );
        assert_eq!(fs::read(&path).unwrap().len(), 16);
    }

    #[test]
    fn png_quantization_bound() {
        let data: Vec<f64> = (0..48).map(|i| (i as f64 * 0.0371) % 1.0).collect();
        let img = Tensor::new(vec![3, 4, 4], data).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back).unwrap() <= 1.0 / 255.0);
    }
}
