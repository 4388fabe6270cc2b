use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{decode_png, encode_png};
use crate::numerics::Tensor;

/// Binary per-pixel mask; `1` marks an editable pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}x{width} cannot hold {} values",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        self.expect_same_grid(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a | b)
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    fn expect_same_grid(&self, other: &RegionMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::invalid(format!(
                "mask grids differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Checks that the mask covers the spatial extent of a `[C, H, W]` image.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        match image.shape() {
            &[_, h, w] if (h, w) == (self.height, self.width) => Ok(()),
            s => Err(Error::invalid(format!(
                "mask {}x{} does not fit image {s:?}",
                self.height, self.width
            ))),
        }
    }

    /// `[1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
    }

    /// Accepts `[H, W]` or `[1, H, W]` tensors holding exactly 0 and 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[h, w] | &[1, h, w] => (h, w),
            s => {
                return Err(Error::invalid(format!(
                    "mask tensor must be [1, H, W], got {s:?}"
                )))
            }
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            match v {
                v if v == 0.0 => bits.push(0),
                v if v == 1.0 => bits.push(1),
                v => return Err(Error::invalid(format!("mask value {v} is not 0 or 1"))),
            }
        }
        Self::new(h, w, bits)
    }

    /// 1-channel PNG with 0 and 255.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.to_tensor())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let t = decode_png(bytes)?;
        if t.shape()[0] != 1 {
            return Err(Error::invalid("mask PNG must be single-channel"));
        }
        let h = t.shape()[1];
        let w = t.shape()[2];
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            match (v * 255.0).round() as u8 {
                0 => bits.push(0),
                255 => bits.push(1),
                other => {
                    return Err(Error::invalid(format!(
                        "mask PNG value {other} is not 0 or 255"
                    )))
                }
            }
        }
        Self::new(h, w, bits)
    }

    /// `(1 - R) ⊙ keep + R ⊙ fill` for `[C, H, W]` images.
    pub fn blend(&self, keep: &Tensor, fill: &Tensor) -> Result<Tensor> {
        self.check_image(keep)?;
        keep.expect_same_shape(fill)?;
        let hw = self.bits.len();
        let mut out = keep.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if self.bits[i % hw] == 1 {
                *v = fill.data()[i];
            }
        }
        Ok(Tensor::from_parts(keep.shape().to_vec(), out))
    }

    /// Largest absolute difference between two images over pixels outside the mask.
    pub fn max_diff_outside(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        self.check_image(a)?;
        a.expect_same_shape(b)?;
        let hw = self.bits.len();
        Ok(a.data()
            .iter()
            .zip(b.data())
            .enumerate()
            .filter(|(i, _)| self.bits[i % hw] == 0)
            .fold(0.0, |m, (_, (x, y))| m.max((x - y).abs())))
    }

    /// Mean absolute difference over pixels inside the mask.
    pub fn mean_abs_diff_inside(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        self.check_image(a)?;
        a.expect_same_shape(b)?;
        let hw = self.bits.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if self.bits[i % hw] == 1 {
                total += (x - y).abs();
                count += 1;
            }
        }
        Ok(if count == 0 {
            0.0
        } else {
            total / count as f64
        })
    }
}
