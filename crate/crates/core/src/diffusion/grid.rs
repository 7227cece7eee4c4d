use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Which space a grid lives in. Grids from different spaces never mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    Latent,
    Pixel,
}

/// A channels × height × width array of finite `f32` values.
///
/// Pixel images use the same type with [`SpaceTag::Pixel`] and values in
/// `[0, 1]` (3 channels for RGB, 4 for RGBA).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    values: Array3<f32>,
    space: SpaceTag,
}

/// RGB or RGBA image in `[0, 1]`, stored channel-major.
pub type PixelImage = LatentGrid;

impl LatentGrid {
    pub fn new(values: Array3<f32>, space: SpaceTag) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite grid entry {bad}")));
        }
        Ok(Self::from_finite(values, space))
    }

    /// Builds a grid from values the caller guarantees to be finite.
    pub(crate) fn from_finite(values: Array3<f32>, space: SpaceTag) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Self { values, space }
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f32>, space: SpaceTag) -> Result<Self> {
        let values = Array3::from_shape_vec(shape, data)
            .map_err(|e| Error::contract(format!("grid shape {shape:?}: {e}")))?;
        Self::new(values, space)
    }

    pub fn zeros(shape: (usize, usize, usize), space: SpaceTag) -> Self {
        Self::from_finite(Array3::zeros(shape), space)
    }

    pub fn filled(shape: (usize, usize, usize), value: f32, space: SpaceTag) -> Self {
        assert!(value.is_finite());
        Self::from_finite(Array3::from_elem(shape, value), space)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn space(&self) -> SpaceTag {
        self.space
    }

    pub fn values(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    /// Flat channel-major view of the data.
    pub fn as_slice(&self) -> &[f32] {
        self.values
            .as_slice()
            .expect("grids are kept in standard layout")
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    /// Fails unless `other` has identical shape and space.
    pub fn ensure_compatible(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "grid shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        if self.space != other.space {
            return Err(Error::contract(format!(
                "grid space mismatch: {:?} vs {:?}",
                self.space, other.space
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`, evaluated per element in f64 and rounded once.
    pub fn lin_comb(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.lin_comb_with(Exec::default(), a, other, b)
    }

    pub fn lin_comb_with(
        &self,
        exec: Exec,
        a: f64,
        other: &LatentGrid,
        b: f64,
    ) -> Result<LatentGrid> {
        self.ensure_compatible(other)?;
        let data = par::map2(exec, self.as_slice(), other.as_slice(), |x, y| {
            (a * x as f64 + b * y as f64) as f32
        });
        self.checked_like(data)
    }

    pub fn scale(&self, a: f64) -> Result<LatentGrid> {
        let data = par::map1(Exec::default(), self.as_slice(), |x| (a * x as f64) as f32);
        self.checked_like(data)
    }

    /// Elementwise `mask ? self : other`, copying values bit-exactly.
    pub fn select(&self, mask: &[u8], other: &LatentGrid) -> Result<LatentGrid> {
        self.ensure_compatible(other)?;
        if mask.len() != self.len() {
            return Err(Error::contract(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                self.len()
            )));
        }
        let data = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .zip(mask)
            .map(|((&x, &y), &m)| if m != 0 { x } else { y })
            .collect();
        Ok(self.like(data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync + Send) -> Result<LatentGrid> {
        let data = par::map1(Exec::default(), self.as_slice(), f);
        self.checked_like(data)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_compatible(other)?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let a = self.as_slice();
        let b = other.as_slice();
        let sum = par::sum_indexed(Exec::default(), a.len(), |i| {
            (a[i] as f64 - b[i] as f64).abs()
        });
        Ok(sum / a.len() as f64)
    }

    /// Raw little-endian bytes, used for hashing and the worker wire format.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.as_slice()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    fn like(&self, data: Vec<f32>) -> LatentGrid {
        let values = Array3::from_shape_vec(self.shape(), data).expect("shape preserved");
        LatentGrid::from_finite(values, self.space)
    }

    fn checked_like(&self, data: Vec<f32>) -> Result<LatentGrid> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("arithmetic produced a non-finite value"));
        }
        Ok(self.like(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let v = Array3::from_elem((1, 1, 2), f32::NAN);
        assert!(LatentGrid::new(v, SpaceTag::Latent).is_err());
    }

    #[test]
    fn combining_across_spaces_fails() {
        let a = LatentGrid::zeros((1, 2, 2), SpaceTag::Latent);
        let b = LatentGrid::zeros((1, 2, 2), SpaceTag::Pixel);
        assert!(a.lin_comb(1.0, &b, 1.0).is_err());
        let c = LatentGrid::zeros((1, 2, 3), SpaceTag::Latent);
        assert!(a.lin_comb(1.0, &c, 1.0).is_err());
    }

    #[test]
    fn select_copies_bits() {
        let a = LatentGrid::filled((1, 1, 3), 0.1, SpaceTag::Latent);
        let b = LatentGrid::filled((1, 1, 3), 0.7, SpaceTag::Latent);
        let out = a.select(&[1, 0, 1], &b).unwrap();
        assert_eq!(out.as_slice(), &[0.1, 0.7, 0.1]);
    }
}
