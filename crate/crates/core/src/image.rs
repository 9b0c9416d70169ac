use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mr,
    Tau,
}

/// Square single-channel image with pixel values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image2D {
    size: usize,
    pixels: Vec<f32>,
    pub modality: Modality,
    pub meta: BTreeMap<String, String>,
}

impl Image2D {
    /// Builds an image, checking the side is a power of two and every pixel
    /// lies in `[-1, 1]`.
    pub fn new(size: usize, pixels: Vec<f32>, modality: Modality) -> Result<Self> {
        if !size.is_power_of_two() || pixels.len() != size * size {
            return Err(Error::shape([size, size], pixels.len()));
        }
        if let Some(p) = pixels.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidRequest(alloc::format!(
                "pixel {p} = {} outside [-1, 1]",
                pixels[p]
            )));
        }
        Ok(Image2D { size, pixels, modality, meta: BTreeMap::new() })
    }

    /// Builds an image after clamping every pixel into `[-1, 1]`. NaN maps to -1.
    pub fn clamped(size: usize, pixels: impl IntoIterator<Item = f64>, modality: Modality) -> Result<Self> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) as f32 })
            .collect();
        Image2D::new(size, pixels, modality)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

/// Boolean grid with the same layout as an [`Image2D`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn complement(&self) -> Mask {
        Mask { size: self.size, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Square-neighbourhood (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let n = self.size;
        let mut out = alloc::vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                if !self.bits[r * n + c] {
                    continue;
                }
                let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(n - 1));
                let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(n - 1));
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        out[rr * n + cc] = true;
                    }
                }
            }
        }
        Mask { size: n, bits: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_out_of_range_and_bad_sizes() {
        assert!(Image2D::new(4, vec![0.0; 16], Modality::Mr).is_ok());
        assert!(Image2D::new(4, vec![1.5; 16], Modality::Mr).is_err());
        assert!(Image2D::new(3, vec![0.0; 9], Modality::Mr).is_err());
        assert!(Image2D::new(4, vec![0.0; 15], Modality::Tau).is_err());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut bits = vec![false; 25];
        bits[12] = true;
        let m = Mask { size: 5, bits }.dilate(2);
        assert_eq!(m.count(), 25);
    }
}
