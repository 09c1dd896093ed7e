//! Dense row-major `f32` arrays with an explicit shape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// A dense array of 32-bit reals. Images, latents, masks and gradients all
/// travel as grids; image-like grids use the `[C, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            bail!(
                Shape,
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a `[C, H, W]` grid.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => bail!(Shape, "expected [C, H, W], got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape != other.shape {
            bail!(Shape, "{:?} vs {:?}", self.shape, other.shape);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        self.same_shape(other)?;
        Ok(Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Grid {
        self.map(|v| v * s)
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Squared Euclidean norm, accumulated in `f64`.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Squared Euclidean distance to `other`, accumulated in `f64`.
    pub fn dist_sq(&self, other: &Grid) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum())
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Value at `[c, y, x]` of a `[C, H, W]` grid.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Channel `c` of a `[C, H, W]` grid as a `[1, H, W]` grid.
    pub fn channel(&self, c: usize) -> Result<Grid> {
        let (ch, h, w) = self.chw()?;
        if c >= ch {
            bail!(Shape, "channel {} out of range for {:?}", c, self.shape);
        }
        Grid::new(&[1, h, w], self.data[c * h * w..(c + 1) * h * w].to_vec())
    }

    /// Average over channels of a `[C, H, W]` grid, yielding `[1, H, W]`.
    pub fn channel_mean(&self) -> Result<Grid> {
        let (c, h, w) = self.chw()?;
        let mut out = vec![0.0f32; h * w];
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = (0..c).map(|k| self.data[k * h * w + i] as f64).sum();
            *o = (s / c as f64) as f32;
        }
        Grid::new(&[1, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Grid::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Grid::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn chw_indexing_is_row_major() {
        let g = Grid::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(g.at3(1, 2, 3), 23.0);
        assert_eq!(g.at3(0, 1, 0), 4.0);
    }

    proptest! {
        #[test]
        fn elementwise_ops_commute_with_permutation(
            a in proptest::collection::vec(-10.0f32..10.0, 12),
            b in proptest::collection::vec(-10.0f32..10.0, 12),
            rot in 0usize..12,
        ) {
            let perm: Vec<usize> = (0..12).map(|i| (i + rot) % 12).collect();
            let ga = Grid::new(&[12], a.clone()).unwrap();
            let gb = Grid::new(&[12], b.clone()).unwrap();
            let pa = Grid::new(&[12], perm.iter().map(|&i| a[i]).collect()).unwrap();
            let pb = Grid::new(&[12], perm.iter().map(|&i| b[i]).collect()).unwrap();
            for (direct, permuted) in [
                (ga.add(&gb).unwrap(), pa.add(&pb).unwrap()),
                (ga.mul(&gb).unwrap(), pa.mul(&pb).unwrap()),
            ] {
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(direct.data()[i], permuted.data()[k]);
                }
            }
        }
    }
}
