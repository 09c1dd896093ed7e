//! Training loop for the denoiser under the kernel-weighted objective.
//!
//! Every iteration draws its batch from a stream derived from `(seed,
//! iteration)`, so a run resumed from a checkpoint consumes exactly the
//! randomness the uninterrupted run would have. Per sample: pick an image,
//! augment it, draw `t ~ U{1..T}`, corrupt it, and draw a training mask. With
//! probability `cond_prob` the sample is denoised with the conditioning hook
//! active (the hidden region removed from the conditioning input), which is
//! what trains the region mixers alongside the rest of the model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{CondFlags, ConditioningHook, MaskPyramid};
use crate::denoiser::{Denoiser, TapHook, TptDenoiser};
use crate::error::{bail, Error, Result};
use crate::gradcheck::Objective;
use crate::grid::Grid;
use crate::kernel::{batch_kernel_weights, hsv_pixel_weights, loss_target, KernelConfig, LossSample, WeightedLoss};
use crate::math::{self, Real};
use crate::optim::{AdamState, OptimizerKind};
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const STREAM_TRAIN: u64 = 0x74_7261_696e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentFlags {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: usize,
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Range of hidden-pixel fractions for training masks.
    pub mask_ratio: (f64, f64),
    pub augment: AugmentFlags,
    /// Probability that a sample is trained with the conditioning hook on.
    pub cond_prob: f64,
    /// Stages the hook applies during training.
    pub cond_flags: CondFlags,
    pub kernel: KernelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings: short run, larger step size than the full recipe.
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_iters: 2000,
            lr_peak: 2e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            mask_ratio: (0.3, 0.5),
            augment: AugmentFlags {
                flip_h: true,
                flip_v: true,
                rot90: true,
            },
            cond_prob: 0.5,
            cond_flags: CondFlags {
                lsc: true,
                ep_sites: 2,
                kernel_blend: false,
            },
            kernel: KernelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe: batch 16, peak 5e-5 with 10% warmup and cosine
    /// decay, decoupled decay 0.01, 250k iterations, 30-50% masks.
    pub fn full_recipe() -> Self {
        Self {
            batch_size: 16,
            total_iters: 250_000,
            lr_peak: 5e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_iters == 0 {
            bail!(Config, "batch size and iteration count must be positive");
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            bail!(Config, "peak learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            bail!(Config, "warmup fraction must lie in [0, 1), got {}", self.warmup_fraction);
        }
        if self.weight_decay < 0.0 {
            bail!(Config, "weight decay must be non-negative");
        }
        let (lo, hi) = self.mask_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            bail!(Config, "mask ratio range must satisfy 0 < lo <= hi < 1, got [{}, {}]", lo, hi);
        }
        if !(0.0..=1.0).contains(&self.cond_prob) {
            bail!(Config, "conditioning probability must lie in [0, 1]");
        }
        self.cond_flags.validate()?;
        self.kernel.validate()
    }

    fn warmup_iters(&self) -> usize {
        (self.warmup_fraction * self.total_iters as f64) as usize
    }
}

/// Linear warmup from 0 to the peak, then cosine decay reaching 0 at the last
/// iteration.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        bail!(Domain, "iteration {} outside 0..{}", iter, cfg.total_iters);
    }
    let warm = cfg.warmup_iters();
    if iter < warm {
        return Ok(cfg.lr_peak * iter as f64 / warm as f64);
    }
    let span = (cfg.total_iters - 1 - warm).max(1) as f64;
    let progress = (iter - warm) as f64 / span;
    Ok(cfg.lr_peak * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress)))
}

/// A drawn training mask; `hole` is 1 where pixels are hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMask {
    pub hole: Grid,
    pub target: f64,
    pub coverage: f64,
    /// Set when rectangles could not reach the target and random pixels
    /// completed the mask.
    pub pixel_fill: bool,
}

const MASK_TOLERANCE: f64 = 0.02;
const MASK_ATTEMPTS: usize = 200;

/// Hides a random fraction in `range` of an `h × w` image with random
/// rectangles of up to half the extent, until the hidden fraction is within
/// 0.02 of the drawn target. If that fails, random pixels are hidden until the
/// fraction equals the target rounded to whole pixels. At least one pixel is
/// always hidden.
pub fn sample_training_mask(h: usize, w: usize, range: (f64, f64), rng: &mut SeededRng) -> Result<TrainingMask> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        bail!(Config, "mask ratio range must satisfy 0 < lo <= hi < 1, got [{}, {}]", lo, hi);
    }
    if h == 0 || w == 0 {
        bail!(Shape, "mask extents must be positive");
    }
    let n = h * w;
    let target = rng.uniform_range(lo, hi);
    let mut hole = vec![false; n];
    let mut count = 0usize;
    let frac = |c: usize| c as f64 / n as f64;
    for _ in 0..MASK_ATTEMPTS {
        if count > 0 && (frac(count) - target).abs() <= MASK_TOLERANCE {
            break;
        }
        let rh = 1 + rng.below(h.div_ceil(2));
        let rw = 1 + rng.below(w.div_ceil(2));
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        let added = (y0..y0 + rh)
            .flat_map(|y| (x0..x0 + rw).map(move |x| y * w + x))
            .filter(|&i| !hole[i])
            .count();
        if frac(count + added) > target + MASK_TOLERANCE {
            continue;
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                hole[y * w + x] = true;
            }
        }
        count += added;
    }
    let mut pixel_fill = false;
    if count == 0 || (frac(count) - target).abs() > MASK_TOLERANCE {
        pixel_fill = true;
        let want = (math::roundf((target * n as f64) as f32) as usize).max(1);
        while count < want {
            let i = rng.below(n);
            if !hole[i] {
                hole[i] = true;
                count += 1;
            }
        }
    }
    let hole = Grid::new(&[1, h, w], hole.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    Ok(TrainingMask {
        hole,
        target,
        coverage: frac(count),
        pixel_fill,
    })
}

/// A fixed geometric transform: optional flips, then `quarter_turns`
/// clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn apply(&self, image: &Grid) -> Result<Grid> {
        let (c, h, w) = image.chw()?;
        if self.quarter_turns % 2 == 1 && h != w {
            bail!(Config, "rotation needs a square image, got {}x{}", h, w);
        }
        let mut out = image.clone();
        if self.flip_h {
            out = Grid::from_fn(out.shape(), |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                out.at3(ch, y, w - 1 - x)
            });
        }
        if self.flip_v {
            out = Grid::from_fn(out.shape(), |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                out.at3(ch, h - 1 - y, x)
            });
        }
        for _ in 0..self.quarter_turns % 4 {
            let (hh, ww) = (out.shape()[1], out.shape()[2]);
            // Clockwise: output row y, column x reads input row hh-1-x, column y.
            out = Grid::from_fn(&[c, ww, hh], |i| {
                let (ch, y, x) = (i / (hh * ww), (i / hh) % ww, i % hh);
                out.at3(ch, hh - 1 - x, y)
            });
        }
        Ok(out)
    }
}

/// Applies independent random flips and a random multiple of 90° rotation as
/// enabled by `flags`.
pub fn augment(image: &Grid, flags: AugmentFlags, rng: &mut SeededRng) -> Result<Grid> {
    let (_, h, w) = image.chw()?;
    if flags.rot90 && h != w {
        bail!(Config, "rotation augmentation needs square images, got {}x{}", h, w);
    }
    let tf = Transform {
        flip_h: flags.flip_h && rng.coin(),
        flip_v: flags.flip_v && rng.coin(),
        quarter_turns: if flags.rot90 { rng.below(4) as u8 } else { 0 },
    };
    tf.apply(image)
}

/// Conditioning inputs for a sample trained with the hook active.
#[derive(Debug, Clone)]
pub struct CondInput {
    pub masks: MaskPyramid,
    pub h_cond: Vec<Grid>,
    pub flags: CondFlags,
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub sample: LossSample,
    pub cond: Option<CondInput>,
}

/// Builds the conditioning inputs for `x0` with hidden pixels `hole`: the
/// known image is corrupted to step `t` and passed through the model once to
/// cache its tap latents.
pub fn conditioning_input(
    model: &TptDenoiser,
    x0: &Grid,
    hole: &Grid,
    t: usize,
    flags: CondFlags,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<CondInput> {
    let known = hole.map(|v| 1.0 - v);
    let n = hole.len();
    let visible = Grid::from_fn(x0.shape(), |i| x0.data()[i] * known.data()[i % n]);
    let x_known = sched.marginal_sample(&visible, t, rng)?;
    let h_cond = model.forward(&x_known, t, None)?.taps;
    let masks = MaskPyramid::new(&known, &model.taps())?;
    Ok(CondInput { masks, h_cond, flags })
}

/// Records `‖μ_θ − target‖²` (optionally weighted per pixel) for one item.
fn record_sq_error<T: Real>(
    tape: &mut Tape<T>,
    model: &TptDenoiser,
    p: &[Var],
    item: &TrainItem,
    target: &Grid,
    pixel_weights: Option<&Grid>,
    kernel: &KernelConfig,
) -> Result<Var> {
    let out = match &item.cond {
        Some(c) => {
            let mut hook = ConditioningHook::new(&c.masks, &c.h_cond, c.flags, kernel);
            let hook: &mut dyn TapHook<T> = &mut hook;
            model.forward_on(tape, p, &item.sample.xt, item.sample.t, Some(hook))?
        }
        None => model.forward_on(tape, p, &item.sample.xt, item.sample.t, None)?,
    };
    let tg = tape.constant(target);
    let mut d = tape.sub(out.mean, tg)?;
    if let Some(w) = pixel_weights {
        let root = tape.constant(&w.map(math::sqrtf));
        d = tape.mul(d, root)?;
    }
    Ok(tape.sum_sq(d))
}

struct Prepared {
    targets: Vec<(Grid, f64)>,
    pixel_weights: Vec<Option<Grid>>,
    sigma: f64,
    weights: Vec<f64>,
}

fn prepare(items: &[TrainItem], sched: &NoiseSchedule, kernel: &KernelConfig) -> Result<Prepared> {
    if items.is_empty() {
        bail!(Domain, "empty batch");
    }
    let targets = items
        .iter()
        .map(|it| loss_target(&it.sample, sched))
        .collect::<Result<Vec<_>>>()?;
    let xts: Vec<&Grid> = items.iter().map(|it| &it.sample.xt).collect();
    let tg: Vec<&Grid> = targets.iter().map(|(g, _)| g).collect();
    let (sigma, weights) = batch_kernel_weights(&xts, &tg, kernel)?;
    let pixel_weights = items
        .iter()
        .map(|it| {
            if kernel.hsv_loss_weight {
                hsv_pixel_weights(&it.sample.x0, kernel).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        targets,
        pixel_weights,
        sigma,
        weights,
    })
}

/// Kernel-weighted loss of a batch and its gradient for every parameter slot.
/// Each sample is recorded on its own tape and back-propagated with seed
/// `K_i / (2 var_i B)`; per-slot gradients are summed in batch order.
pub fn loss_and_grad(
    model: &TptDenoiser,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    kernel: &KernelConfig,
) -> Result<(WeightedLoss, Vec<Vec<f32>>)> {
    loss_and_grad_on::<f32>(model, items, sched, kernel)
}

/// [`loss_and_grad`] evaluated in precision `T`.
pub fn loss_and_grad_on<T: Real>(
    model: &TptDenoiser,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    kernel: &KernelConfig,
) -> Result<(WeightedLoss, Vec<Vec<T>>)> {
    let prep = prepare(items, sched, kernel)?;
    let b = items.len() as f64;
    let mut grads: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|(_, g)| vec![T::from_f32(0.0); g.len()])
        .collect();
    let mut terms = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let (target, var) = &prep.targets[i];
        let mut tape: Tape<T> = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let sq = record_sq_error(&mut tape, model, &p, item, target, prep.pixel_weights[i].as_ref(), kernel)?;
        let term = tape.value(sq)[0].to_f64() / (2.0 * var);
        if !term.is_finite() {
            return Err(Error::NonFinite(format!("loss term of sample {} is {}", i, term)));
        }
        terms.push(term);
        let seed = prep.weights[i] / (2.0 * var * b);
        if seed == 0.0 {
            continue;
        }
        let g = tape.backward(sq, &[T::from_f64(seed)])?;
        for (slot, v) in p.iter().enumerate() {
            if let Some(gs) = g.get(*v) {
                for (acc, &x) in grads[slot].iter_mut().zip(gs) {
                    *acc += x;
                }
            }
        }
    }
    let loss = prep.weights.iter().zip(&terms).map(|(w, t)| w * t).sum::<f64>() / b;
    Ok((
        WeightedLoss {
            loss,
            sigma: prep.sigma,
            weights: prep.weights,
            terms,
        },
        grads,
    ))
}

/// The batch loss as a function of the flattened parameters, for finite
/// difference checks. Values and gradients are both evaluated in `f64`.
pub struct BatchLoss<'a> {
    pub model: &'a TptDenoiser,
    pub items: &'a [TrainItem],
    pub sched: &'a NoiseSchedule,
    pub kernel: &'a KernelConfig,
}

impl BatchLoss<'_> {
    fn with_params(&self, flat: &Grid) -> Result<TptDenoiser> {
        let mut m = self.model.clone();
        m.params_mut().assign_flat(flat.data())?;
        Ok(m)
    }
}

impl Objective for BatchLoss<'_> {
    fn value(&self, x: &Grid) -> Result<f64> {
        let model = self.with_params(x)?;
        let prep = prepare(self.items, self.sched, self.kernel)?;
        let mut total = 0.0;
        for (i, item) in self.items.iter().enumerate() {
            let (target, var) = &prep.targets[i];
            let mut tape: Tape<f64> = Tape::new();
            let p = model.params().bind(&mut tape, false);
            let sq = record_sq_error(&mut tape, &model, &p, item, target, prep.pixel_weights[i].as_ref(), self.kernel)?;
            total += prep.weights[i] * tape.value(sq)[0] / (2.0 * var);
        }
        Ok(total / self.items.len() as f64)
    }

    fn gradient(&self, x: &Grid) -> Result<Grid> {
        let model = self.with_params(x)?;
        let (_, grads) = loss_and_grad_on::<f64>(&model, self.items, self.sched, self.kernel)?;
        Grid::new(x.shape(), grads.concat().into_iter().map(|v| v as f32).collect())
    }
}

/// Draws the batch for iteration `iter`.
pub fn draw_batch(
    model: &TptDenoiser,
    data: &[Grid],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<(Vec<usize>, Vec<TrainItem>)> {
    if data.is_empty() {
        bail!(Domain, "training set is empty");
    }
    let mut rng = SeededRng::new(cfg.seed).derive(STREAM_TRAIN).derive(iter as u64);
    let [_, h, w] = model.image_shape();
    let mut indices = Vec::with_capacity(cfg.batch_size);
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.below(data.len());
        indices.push(idx);
        let x0 = augment(&data[idx], cfg.augment, &mut rng)?;
        let t = 1 + rng.below(sched.steps());
        let xt = sched.marginal_sample(&x0, t, &mut rng)?;
        let mask = sample_training_mask(h, w, cfg.mask_ratio, &mut rng)?;
        let conditioned = rng.uniform() < cfg.cond_prob && cfg.cond_flags.any();
        let cond = if conditioned {
            Some(conditioning_input(model, &x0, &mask.hole, t, cfg.cond_flags, sched, &mut rng)?)
        } else {
            None
        };
        items.push(TrainItem {
            sample: LossSample { x0, xt, t },
            cond,
        });
    }
    Ok((indices, items))
}

/// Optimizer state plus the loss series; everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TptDenoiser,
    pub opt: AdamState,
    /// Next iteration to run.
    pub iter: usize,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(model: TptDenoiser, cfg: &TrainConfig) -> Self {
        let opt = AdamState::new(cfg.optimizer, cfg.weight_decay, model.params());
        Self {
            model,
            opt,
            iter: 0,
            losses: Vec::new(),
        }
    }

    /// Runs one iteration and returns its loss.
    pub fn step(&mut self, data: &[Grid], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<f64> {
        let iter = self.iter;
        let lr = lr_at(iter, cfg)?;
        let (_, items) = draw_batch(&self.model, data, sched, cfg, iter)?;
        let (loss, grads) = match loss_and_grad(&self.model, &items, sched, &cfg.kernel) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { iter, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.loss.is_finite() || loss.loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { iter, loss: loss.loss });
        }
        self.opt.step(self.model.params_mut(), &grads, lr)?;
        self.losses.push(loss.loss);
        self.iter += 1;
        Ok(loss.loss)
    }
}

/// Trains until `cfg.total_iters`, calling `progress(iter, loss)` after every
/// iteration.
pub fn train(
    state: &mut TrainState,
    data: &[Grid],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<()> {
    cfg.validate()?;
    let shape = state.model.image_shape();
    if let Some(bad) = data.iter().find(|g| g.shape() != shape) {
        bail!(Shape, "training image {:?} does not match model input {:?}", bad.shape(), shape);
    }
    while state.iter < cfg.total_iters {
        let loss = state.step(data, sched, cfg)?;
        progress(state.iter - 1, loss);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::gradcheck::check_gradient;
    use crate::schedule::build_schedule;

    fn toy_model(seed: u64) -> TptDenoiser {
        let mut rng = SeededRng::new(seed);
        let mut m = TptDenoiser::new(DenoiserConfig::new(3, 8, 8), &mut rng).unwrap();
        // Move off the zero-initialized head and mixer outputs so every
        // parameter receives gradient.
        let flat: Vec<f32> = m
            .params()
            .flatten()
            .data()
            .iter()
            .map(|&v| v + 0.05 * rng.normal() as f32)
            .collect();
        m.params_mut().assign_flat(&flat).unwrap();
        m
    }

    fn toy_data(n: usize, seed: u64) -> Vec<Grid> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| {
                let a = rng.uniform_range(-0.8, 0.8) as f32;
                let split = 2 + rng.below(4);
                Grid::from_fn(&[3, 8, 8], |i| if i % 8 < split { a } else { -a })
            })
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            total_iters: 10,
            lr_peak: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_endpoints_and_peak() {
        let cfg = TrainConfig {
            total_iters: 1000,
            lr_peak: 1e-3,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(100, &cfg).unwrap(), 1e-3);
        assert!(lr_at(999, &cfg).unwrap().abs() < 1e-18);
        assert!((lr_at(50, &cfg).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(1000, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for i in 100..1000 {
            let lr = lr_at(i, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn full_recipe_values() {
        let cfg = TrainConfig::full_recipe();
        assert_eq!(cfg.lr_peak, 5e-5);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.mask_ratio, (0.3, 0.5));
        assert_eq!(cfg.weight_decay, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn mask_coverage_stays_in_band() {
        let mut rng = SeededRng::new(5);
        for _ in 0..1000 {
            let m = sample_training_mask(32, 32, (0.3, 0.5), &mut rng).unwrap();
            assert!((0.28..=0.52).contains(&m.coverage), "{}", m.coverage);
            assert_eq!(m.hole.sum() / 1024.0, m.coverage);
            assert!(m.hole.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(sample_training_mask(32, 32, (0.5, 0.3), &mut rng).is_err());
    }

    #[test]
    fn pixel_fill_hits_rounded_target() {
        // A 1-pixel-wide image leaves rectangles little room; whatever path
        // is taken, coverage must be within tolerance.
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            let m = sample_training_mask(3, 1, (0.3, 0.5), &mut rng).unwrap();
            if m.pixel_fill {
                assert_eq!(m.coverage, (math::roundf((m.target * 3.0) as f32) as f64).max(1.0) / 3.0);
            } else {
                assert!((m.coverage - m.target).abs() <= MASK_TOLERANCE);
            }
        }
    }

    #[test]
    fn augment_transforms() {
        let img = Grid::from_fn(&[2, 3, 3], |i| i as f32);
        let mut rng = SeededRng::new(0);
        assert_eq!(augment(&img, AugmentFlags::default(), &mut rng).unwrap(), img);
        let fh = Transform {
            flip_h: true,
            ..Transform::default()
        };
        assert_eq!(fh.apply(&fh.apply(&img).unwrap()).unwrap(), img);
        let rot = Transform {
            quarter_turns: 1,
            ..Transform::default()
        };
        let r = rot.apply(&img).unwrap();
        // Clockwise turn of [[0,1,2],[3,4,5],[6,7,8]].
        assert_eq!(&r.data()[..9], &[6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
        let four = Transform {
            quarter_turns: 4,
            ..Transform::default()
        };
        assert_eq!(four.apply(&img).unwrap(), img);
        let wide = Grid::zeros(&[1, 2, 4]);
        let flags = AugmentFlags {
            rot90: true,
            ..AugmentFlags::default()
        };
        assert!(matches!(augment(&wide, flags, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn batches_are_seed_determined_and_kernel_independent() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let model = toy_model(1);
        let data = toy_data(10, 2);
        let cfg = quick_cfg();
        let (ia, a) = draw_batch(&model, &data, &sched, &cfg, 3).unwrap();
        let (ib, b) = draw_batch(&model, &data, &sched, &cfg, 3).unwrap();
        assert_eq!(ia, ib);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample.xt, y.sample.xt);
            assert_eq!(x.cond.is_some(), y.cond.is_some());
        }
        let off = TrainConfig {
            kernel: KernelConfig {
                policy: crate::kernel::BandwidthPolicy::Fixed(f64::INFINITY),
                ..cfg.kernel.clone()
            },
            ..cfg.clone()
        };
        let (ic, _) = draw_batch(&model, &data, &sched, &off, 3).unwrap();
        assert_eq!(ia, ic);
        let (id, _) = draw_batch(&model, &data, &sched, &cfg, 4).unwrap();
        assert_ne!(ia, id);
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let model = toy_model(3);
        let data = toy_data(4, 4);
        let cfg = TrainConfig {
            cond_prob: 1.0,
            ..quick_cfg()
        };
        let (_, mut items) = draw_batch(&model, &data, &sched, &cfg, 0).unwrap();
        // Mix a conditioned and an unconditioned sample, and cover t = 1.
        items[1].cond = None;
        items[2].sample.t = 1;
        let obj = BatchLoss {
            model: &model,
            items: &items,
            sched: &sched,
            kernel: &cfg.kernel,
        };
        let x = model.params().flatten();
        let mut coords: Vec<usize> = (0..x.len()).step_by(97).collect();
        for name in ["ep.input.w1", "ep.middle.w2", "head.w", "stem.w"] {
            let start: usize = model
                .params()
                .iter()
                .take_while(|(n, _)| *n != name)
                .map(|(_, g)| g.len())
                .sum();
            coords.push(start + 1);
        }
        let report = check_gradient(&obj, &x, Some(&coords)).unwrap();
        assert!(report.passed(1e-3), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn loss_matches_reference_without_conditioning() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let model = toy_model(6);
        let data = toy_data(4, 7);
        let cfg = TrainConfig {
            cond_prob: 0.0,
            ..quick_cfg()
        };
        let (_, items) = draw_batch(&model, &data, &sched, &cfg, 0).unwrap();
        let (loss, _) = loss_and_grad(&model, &items, &sched, &cfg.kernel).unwrap();
        let samples: Vec<LossSample> = items.iter().map(|i| i.sample.clone()).collect();
        let reference = crate::kernel::kernel_weighted_loss(&samples, &model, &sched, &cfg.kernel).unwrap();
        assert!((loss.loss - reference.loss).abs() <= 1e-4 * reference.loss.abs().max(1.0));
        assert_eq!(loss.weights, reference.weights);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let data = toy_data(6, 8);
        let cfg = TrainConfig {
            total_iters: 4,
            ..quick_cfg()
        };
        let mut full = TrainState::new(toy_model(9), &cfg);
        train(&mut full, &data, &sched, &cfg, |_, _| {}).unwrap();
        let mut part = TrainState::new(toy_model(9), &cfg);
        for _ in 0..2 {
            part.step(&data, &sched, &cfg).unwrap();
        }
        let mut resumed = part.clone();
        train(&mut resumed, &data, &sched, &cfg, |_, _| {}).unwrap();
        assert_eq!(full.model.params(), resumed.model.params());
        assert_eq!(full.losses, resumed.losses);
        assert_eq!(full.iter, 4);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let data = toy_data(4, 10);
        let cfg = quick_cfg();
        let mut model = toy_model(11);
        let flat: Vec<f32> = model.params().flatten().data().iter().map(|v| v * 1e4).collect();
        model.params_mut().assign_flat(&flat).unwrap();
        let mut state = TrainState::new(model, &cfg);
        match state.step(&data, &sched, &cfg) {
            Err(Error::Divergence { iter, .. }) => assert_eq!(iter, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
