//! Counter-based seeded randomness.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, stream id)`, so a
//! worker can derive its own stream by index without touching the parent's
//! position. Identical seed and call sequence give identical bits.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::grid::Grid;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// An independent stream keyed by `label`, regardless of how far this
    /// stream has been consumed.
    pub fn derive(&self, label: u64) -> SeededRng {
        Self::with_stream(self.seed, splitmix(self.stream ^ splitmix(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is negligible for the ranges used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal() as f32).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Mean or standard deviation argument: one value for every element, or a
/// grid matching the requested shape.
#[derive(Debug, Clone, Copy)]
pub enum Moment<'a> {
    Scalar(f32),
    Grid(&'a Grid),
}

impl Moment<'_> {
    fn check(&self, shape: &[usize], what: &str) -> Result<()> {
        if let Moment::Grid(g) = self {
            if g.shape() != shape {
                bail!(Shape, "{} has shape {:?}, expected {:?}", what, g.shape(), shape);
            }
        }
        Ok(())
    }

    #[inline]
    fn at(&self, i: usize) -> f32 {
        match self {
            Moment::Scalar(v) => *v,
            Moment::Grid(g) => g.data()[i],
        }
    }
}

/// `mean + std * z` with `z` i.i.d. standard normal drawn from `rng`.
pub fn gaussian_sample(
    rng: &mut SeededRng,
    shape: &[usize],
    mean: Moment<'_>,
    std: Moment<'_>,
) -> Result<Grid> {
    mean.check(shape, "mean")?;
    std.check(shape, "std")?;
    let len: usize = shape.iter().product();
    for i in 0..len {
        let s = std.at(i);
        if !(s >= 0.0) {
            bail!(Domain, "standard deviation {} at index {} is negative", s, i);
        }
    }
    let z = rng.normals(len);
    let data = z
        .iter()
        .enumerate()
        .map(|(i, &z)| mean.at(i) + std.at(i) * z)
        .collect();
    Grid::new(shape, data)
}
