//! Latent-space conditioning and region propagation.
//!
//! A binary mask `m` (1 = known pixel) is average-pooled to every tap
//! resolution. At each tap the hook composes, in this order:
//!
//! 1. latent blend `h* = h ⊙ (1 − D(m)) + h_cond ⊙ D(m)`;
//! 2. region propagation: mask-wise max-pool into a conditioned and an
//!    inferred vector, a residual two-layer mixer over both, and an unpool that
//!    adds each region's update back to its positions;
//! 3. kernel-guided blend `K · h + (1 − K) · h_cond` with a scalar RBF weight.
//!
//! The grid functions below are the reference forms; [`ConditioningHook`]
//! records the same algebra on a tape so the mixer can be trained.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{Mixer, Tap, TapHook, TapInfo};
use crate::error::{bail, Error, Result};
use crate::grid::Grid;
use crate::kernel::{rbf_kernel, resolve_bandwidth, KernelConfig};
use crate::math::{self, Real};
use crate::tape::{Tape, Var};

/// Default `D(m)` level at or above which a position counts as conditioned.
pub const REGION_THRESHOLD: f32 = 0.5;

/// Non-overlapping average pooling of a `[1, H, W]` mask to `[1, h, w]`.
pub fn downsample_mask(m: &Grid, h: usize, w: usize) -> Result<Grid> {
    let (c, mh, mw) = m.chw()?;
    if c != 1 {
        bail!(Shape, "mask must have one channel, got {}", c);
    }
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        bail!(Config, "mask {}x{} cannot be pooled to {}x{}", mh, mw, h, w);
    }
    let (fy, fx) = (mh / h, mw / w);
    let inv = 1.0 / (fy * fx) as f64;
    Ok(Grid::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let mut s = 0.0f64;
        for dy in 0..fy {
            for dx in 0..fx {
                s += m.data()[(y * fy + dy) * mw + x * fx + dx] as f64;
            }
        }
        (s * inv) as f32
    }))
}

/// A binary mask and its pooled copies, one per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    mask: Grid,
    levels: Vec<Grid>,
}

impl MaskPyramid {
    pub fn new(mask: &Grid, taps: &[TapInfo]) -> Result<Self> {
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            bail!(Domain, "mask values must be 0 or 1");
        }
        let levels = taps
            .iter()
            .map(|t| downsample_mask(mask, t.height, t.width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mask: mask.clone(),
            levels,
        })
    }

    pub fn mask(&self) -> &Grid {
        &self.mask
    }

    pub fn levels(&self) -> &[Grid] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> Result<&Grid> {
        self.levels
            .get(i)
            .ok_or_else(|| Error::Shape(format!("no mask level {} of {}", i, self.levels.len())))
    }
}

fn check_level(h: &Grid, dm: &Grid) -> Result<(usize, usize)> {
    let (c, hh, ww) = h.chw()?;
    let (mc, mh, mw) = dm.chw()?;
    if mc != 1 || mh != hh || mw != ww {
        bail!(Shape, "mask level {:?} does not align with latent {:?}", dm.shape(), h.shape());
    }
    Ok((c, hh * ww))
}

/// `h_infr ⊙ (1 − Dm) + h_cond ⊙ Dm` with `Dm` broadcast over channels.
pub fn blend_latent(h_infr: &Grid, h_cond: &Grid, dm: &Grid) -> Result<Grid> {
    h_infr.same_shape(h_cond)?;
    let (_, n) = check_level(h_infr, dm)?;
    let d = dm.data();
    Ok(Grid::from_fn(h_infr.shape(), |i| {
        let m = d[i % n];
        h_infr.data()[i] * (1.0 - m) + h_cond.data()[i] * m
    }))
}

/// Result of mask-wise max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPool {
    /// Channelwise max over the conditioned region.
    pub cond: Vec<f32>,
    /// Channelwise max over the inferred region.
    pub infr: Vec<f32>,
    /// Per position, `true` when conditioned.
    pub assignment: Vec<bool>,
    /// Per region and channel, the flat index of the maximizing element of
    /// `h` (taken from the other region when a region is empty).
    pub argmax: [Vec<usize>; 2],
}

#[allow(clippy::needless_range_loop)]
fn region_argmax<T: Real>(values: &[T], c: usize, n: usize, assignment: &[bool]) -> [Vec<Option<usize>>; 2] {
    let mut best: [Vec<Option<usize>>; 2] = [vec![None; c], vec![None; c]];
    for ch in 0..c {
        for (p, &is_cond) in assignment.iter().enumerate() {
            let r = if is_cond { 0 } else { 1 };
            let i = ch * n + p;
            match best[r][ch] {
                Some(j) if values[j] >= values[i] => {}
                _ => best[r][ch] = Some(i),
            }
        }
    }
    best
}

fn resolve_argmax(best: [Vec<Option<usize>>; 2]) -> [Vec<usize>; 2] {
    let [cond, infr] = best;
    let pick = |own: &[Option<usize>], other: &[Option<usize>]| -> Vec<usize> {
        own.iter()
            .zip(other)
            .map(|(a, b)| a.or(*b).expect("at least one region is populated"))
            .collect()
    };
    [pick(&cond, &infr), pick(&infr, &cond)]
}

fn assign_regions(dm: &[f32], threshold: f32) -> Vec<bool> {
    dm.iter().map(|&d| d >= threshold).collect()
}

/// Splits positions into conditioned (`Dm >= threshold`) and inferred, and
/// takes the channelwise max of `h` over each. An empty region takes the other
/// region's vector.
pub fn maskwise_maxpool(dm: &Grid, h: &Grid, threshold: f32) -> Result<RegionPool> {
    let (c, n) = check_level(h, dm)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Domain, "region threshold must lie in (0, 1), got {}", threshold);
    }
    let assignment = assign_regions(dm.data(), threshold);
    let argmax = resolve_argmax(region_argmax(h.data(), c, n, &assignment));
    let take = |idx: &[usize]| idx.iter().map(|&i| h.data()[i]).collect::<Vec<f32>>();
    Ok(RegionPool {
        cond: take(&argmax[0]),
        infr: take(&argmax[1]),
        assignment,
        argmax,
    })
}

/// Weights of one region mixer `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    /// `[hidden, 2C]`
    pub w1: Grid,
    /// `[hidden]`
    pub b1: Grid,
    /// `[2C, hidden]`
    pub w2: Grid,
}

impl MixerParams {
    fn dims(&self) -> Result<(usize, usize)> {
        let (hid, two_c) = match *self.w1.shape() {
            [a, b] => (a, b),
            ref s => bail!(Shape, "mixer w1 must be rank 2, got {:?}", s),
        };
        if self.b1.len() != hid || self.w2.shape() != [two_c, hid] || two_c % 2 != 0 {
            bail!(
                Shape,
                "inconsistent mixer shapes {:?}, {:?}, {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape()
            );
        }
        Ok((hid, two_c / 2))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

/// Residual mixer: `[cond; infr] + W2 · silu(W1 · [cond; infr] + b1)`, split
/// back into the two region vectors.
pub fn ep_mix(cond: &[f32], infr: &[f32], omega: &MixerParams) -> Result<(Vec<f32>, Vec<f32>)> {
    let (hid, c) = omega.dims()?;
    if cond.len() != c || infr.len() != c {
        bail!(Shape, "region vectors of length {} and {} for a {}-channel mixer", cond.len(), infr.len(), c);
    }
    let v: Vec<f32> = cond.iter().chain(infr).copied().collect();
    let z: Vec<f64> = (0..hid)
        .map(|j| {
            let s: f64 = (0..2 * c)
                .map(|i| omega.w1.data()[j * 2 * c + i] as f64 * v[i] as f64)
                .sum();
            silu(s + omega.b1.data()[j] as f64)
        })
        .collect();
    let out: Vec<f32> = (0..2 * c)
        .map(|i| {
            let u: f64 = (0..hid).map(|j| omega.w2.data()[i * hid + j] as f64 * z[j]).sum();
            (v[i] as f64 + u) as f32
        })
        .collect();
    Ok((out[..c].to_vec(), out[c..].to_vec()))
}

/// Adds each region's update `mixed − pooled` to every position of that region.
pub fn maskwise_unpool(mixed: (&[f32], &[f32]), pool: &RegionPool, h: &Grid) -> Result<Grid> {
    let (c, hh, ww) = h.chw()?;
    let n = hh * ww;
    if pool.assignment.len() != n || pool.cond.len() != c || pool.infr.len() != c {
        bail!(
            Domain,
            "region assignment for {} positions and {} channels does not match latent {:?}",
            pool.assignment.len(),
            pool.cond.len(),
            h.shape()
        );
    }
    if mixed.0.len() != c || mixed.1.len() != c {
        bail!(Shape, "mixed vectors must have length {}", c);
    }
    let delta: [Vec<f32>; 2] = [
        mixed.0.iter().zip(&pool.cond).map(|(m, p)| m - p).collect(),
        mixed.1.iter().zip(&pool.infr).map(|(m, p)| m - p).collect(),
    ];
    Ok(Grid::from_fn(h.shape(), |i| {
        let (ch, p) = (i / n, i % n);
        let r = if pool.assignment[p] { 0 } else { 1 };
        h.data()[i] + delta[r][ch]
    }))
}

/// `K · h_infr + (1 − K) · h_cond` with `K = rbf(h_infr, h_cond, σ)`.
pub fn kernel_token_blend(h_infr: &Grid, h_cond: &Grid, sigma: f64) -> Result<Grid> {
    let k = rbf_kernel(h_infr, h_cond, sigma)?;
    let kf = k as f32;
    h_infr.zip_map(h_cond, |a, b| kf * a + (1.0 - kf) * b)
}

/// Which conditioning stages run at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CondFlags {
    /// Latent blend at every tap.
    pub lsc: bool,
    /// Number of propagation sites in use: 0, 1 (input level) or 2 (input
    /// level and middle block).
    pub ep_sites: usize,
    /// Kernel-guided blend at every tap.
    pub kernel_blend: bool,
}

impl CondFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn any(&self) -> bool {
        self.lsc || self.ep_sites > 0 || self.kernel_blend
    }

    pub fn validate(&self) -> Result<()> {
        if self.ep_sites > 2 {
            bail!(Config, "at most two propagation sites exist, got {}", self.ep_sites);
        }
        Ok(())
    }

    fn ep_at(&self, tap: Tap) -> bool {
        match tap {
            Tap::Level(0) => self.ep_sites >= 1,
            Tap::Middle => self.ep_sites >= 2,
            Tap::Level(_) => false,
        }
    }
}

/// Hook that applies the conditioning stages to each tapped latent, using
/// cached conditioned latents for the current step.
pub struct ConditioningHook<'a> {
    pub masks: &'a MaskPyramid,
    /// Conditioned latents `[C, h, w]` in tap order.
    pub h_cond: &'a [Grid],
    pub flags: CondFlags,
    pub threshold: f32,
    pub kernel: &'a KernelConfig,
}

impl<'a> ConditioningHook<'a> {
    pub fn new(masks: &'a MaskPyramid, h_cond: &'a [Grid], flags: CondFlags, kernel: &'a KernelConfig) -> Self {
        Self {
            masks,
            h_cond,
            flags,
            threshold: REGION_THRESHOLD,
            kernel,
        }
    }

    /// The grid-level composition of the enabled stages, for one tap.
    pub fn reference(&self, index: usize, tap: Tap, h: &Grid, mixer: Option<&MixerParams>) -> Result<Grid> {
        let hc = self.cond_at(index, h)?;
        let dm = self.masks.level(index)?;
        let mut out = h.clone();
        if self.flags.lsc {
            out = blend_latent(&out, hc, dm)?;
        }
        if self.flags.ep_at(tap) {
            let omega = mixer.ok_or_else(|| Error::Config("model has no region mixer".into()))?;
            let pool = maskwise_maxpool(dm, &out, self.threshold)?;
            let (mc, mi) = ep_mix(&pool.cond, &pool.infr, omega)?;
            out = maskwise_unpool((&mc, &mi), &pool, &out)?;
        }
        if self.flags.kernel_blend {
            let sigma = resolve_bandwidth(&[(&out, hc)], self.kernel)?;
            out = kernel_token_blend(&out, hc, sigma)?;
        }
        Ok(out)
    }

    fn cond_at(&self, index: usize, h: &Grid) -> Result<&'a Grid> {
        let hc = self
            .h_cond
            .get(index)
            .ok_or_else(|| Error::Shape(format!("no conditioned latent for tap {}", index)))?;
        if hc.len() != h.len() {
            bail!(Shape, "conditioned latent {:?} vs latent {:?}", hc.shape(), h.shape());
        }
        Ok(hc)
    }
}

impl<T: Real> TapHook<T> for ConditioningHook<'_> {
    fn apply(&mut self, tape: &mut Tape<T>, index: usize, tap: Tap, h: Var, mixer: Option<Mixer>) -> Result<Var> {
        if !self.flags.any() {
            return Ok(h);
        }
        let (c, n) = match *tape.shape(h) {
            [c, n] => (c, n),
            ref s => bail!(Shape, "tapped latent must be [C, N], got {:?}", s),
        };
        let hc = self
            .h_cond
            .get(index)
            .ok_or_else(|| Error::Shape(format!("no conditioned latent for tap {}", index)))?;
        let dm = self.masks.level(index)?;
        if hc.len() != c * n || dm.len() != n {
            bail!(
                Shape,
                "tap {} is [{}, {}] but conditioned latent is {:?} and mask level {:?}",
                index,
                c,
                n,
                hc.shape(),
                dm.shape()
            );
        }
        let mut out = h;
        if self.flags.lsc {
            let keep = Grid::from_fn(&[c, n], |i| 1.0 - dm.data()[i % n]);
            let cond = Grid::from_fn(&[c, n], |i| hc.data()[i] * dm.data()[i % n]);
            let keep = tape.constant(&keep);
            let cond = tape.constant(&cond);
            let kept = tape.mul(out, keep)?;
            out = tape.add(kept, cond)?;
        }
        if self.flags.ep_at(tap) {
            let Some(m) = mixer else {
                bail!(Config, "propagation requested at {:?} but the model has no region mixer", tap);
            };
            out = propagate_on_tape(tape, out, dm, self.threshold, m, c, n)?;
        }
        if self.flags.kernel_blend {
            // The weight is treated as a constant of the step.
            let cur = tape.grid(out).reshape(hc.shape())?;
            let sigma = resolve_bandwidth(&[(&cur, hc)], self.kernel)?;
            let k = rbf_kernel(&cur, hc, sigma)?;
            let scaled = tape.scale(out, T::from_f64(k));
            let rest = hc.scale((1.0 - k) as f32).reshape(&[c, n])?;
            let rest = tape.constant(&rest);
            out = tape.add(scaled, rest)?;
        }
        Ok(out)
    }
}

/// Pool, mix and unpool `h` (`[C, N]`) on the tape. Gradients reach `h`
/// through the maximizing elements and the mixer weights through both layers.
fn propagate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    dm: &Grid,
    threshold: f32,
    m: Mixer,
    c: usize,
    n: usize,
) -> Result<Var> {
    if tape.shape(m.w1).get(1) != Some(&(2 * c)) {
        bail!(Shape, "mixer expects {:?} inputs for a {}-channel latent", tape.shape(m.w1), c);
    }
    let assignment = assign_regions(dm.data(), threshold);
    let argmax = resolve_argmax(region_argmax(tape.value(h), c, n, &assignment));
    let index: Arc<[u32]> = argmax[0].iter().chain(&argmax[1]).map(|&i| i as u32).collect();
    let pooled = tape.gather(h, index, &[2 * c, 1])?;
    let hidden = tape.matmul(m.w1, false, pooled, false)?;
    let hidden = tape.add_channel(hidden, m.b1)?;
    let hidden = tape.silu(hidden);
    let update = tape.matmul(m.w2, false, hidden, false)?;
    let spread: Arc<[u32]> = (0..c * n)
        .map(|i| {
            let (ch, p) = (i / n, i % n);
            let r = if assignment[p] { 0 } else { 1 };
            (r * c + ch) as u32
        })
        .collect();
    let spread = tape.gather(update, spread, &[c, n])?;
    tape.add(h, spread)
}
