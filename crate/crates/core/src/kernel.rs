//! Kernel-adaptive weighting: the Gaussian RBF similarity, bandwidth
//! resolution, the high-structural-variance (HSV) map and the kernel-weighted
//! posterior-matching objective.
//!
//! Each training sample contributes
//! `K(x_t, μ_q) / (2 σ_q²(t)) · ‖μ_θ(x_t, t) − μ_q‖²`, where the kernel weight
//! is a constant under differentiation. At `t = 1` the target is `x_0` itself
//! and the variance is `β_1` (the Gaussian decoder term).

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::Denoiser;
use crate::error::{bail, Error, Result};
use crate::grid::Grid;
use crate::math;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    /// A fixed σ. `f64::INFINITY` turns the kernel weight into the constant 1.
    Fixed(f64),
    /// `σ = sqrt(median ‖a − b‖² / 2)` over the batch, so the median pair
    /// receives weight `exp(−1)`.
    Median,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub policy: BandwidthPolicy,
    pub sigma_floor: f64,
    pub hsv_window: usize,
    pub hsv_epsilon: f64,
    /// Scale per-pixel loss terms by `1 + max(HSV, 0)` of the clean image.
    pub hsv_loss_weight: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            policy: BandwidthPolicy::Median,
            sigma_floor: 1e-3,
            hsv_window: 3,
            hsv_epsilon: 0.0,
            hsv_loss_weight: false,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_floor > 0.0) {
            bail!(Config, "sigma_floor must be positive, got {}", self.sigma_floor);
        }
        if let BandwidthPolicy::Fixed(s) = self.policy {
            if !(s > 0.0) {
                bail!(Config, "fixed bandwidth must be positive, got {}", s);
            }
        }
        if self.hsv_window < 3 || self.hsv_window.is_multiple_of(2) {
            bail!(Config, "hsv window must be odd and at least 3, got {}", self.hsv_window);
        }
        if !(self.hsv_epsilon >= 0.0) {
            bail!(Config, "hsv epsilon must be non-negative, got {}", self.hsv_epsilon);
        }
        Ok(())
    }
}

/// `exp(−‖a − b‖² / (2σ²))` over all elements.
pub fn rbf_kernel(a: &Grid, b: &Grid, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        bail!(Domain, "bandwidth must be positive, got {}", sigma);
    }
    let d2 = a.dist_sq(b)?;
    Ok(rbf_from_dist_sq(d2, sigma))
}

pub(crate) fn rbf_from_dist_sq(d2: f64, sigma: f64) -> f64 {
    if sigma.is_infinite() {
        return 1.0;
    }
    math::exp(-d2 / (2.0 * sigma * sigma))
}

pub fn resolve_bandwidth(pairs: &[(&Grid, &Grid)], cfg: &KernelConfig) -> Result<f64> {
    if pairs.is_empty() {
        bail!(Domain, "bandwidth resolution needs at least one pair");
    }
    match cfg.policy {
        BandwidthPolicy::Fixed(s) => Ok(s.max(cfg.sigma_floor)),
        BandwidthPolicy::Median => {
            let mut d2 = pairs
                .iter()
                .map(|(a, b)| a.dist_sq(b))
                .collect::<Result<Vec<f64>>>()?;
            Ok(median_bandwidth(&mut d2, cfg.sigma_floor))
        }
    }
}

fn median_bandwidth(d2: &mut [f64], floor: f64) -> f64 {
    d2.sort_by(|a, b| a.total_cmp(b));
    let n = d2.len();
    let med = if n % 2 == 1 {
        d2[n / 2]
    } else {
        0.5 * (d2[n / 2 - 1] + d2[n / 2])
    };
    math::sqrt(med / 2.0).max(floor)
}

/// Per-pixel variance of the gradient magnitude over a `window × window`
/// neighborhood, minus `epsilon`. Gradients are central differences; both the
/// gradient stencil and the window replicate the border pixels.
pub fn hsv_map(image: &Grid, window: usize, epsilon: f64) -> Result<Grid> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        bail!(Shape, "hsv map expects a single channel, got {}", c);
    }
    if window < 3 || window.is_multiple_of(2) {
        bail!(Config, "hsv window must be odd and at least 3, got {}", window);
    }
    if h < window || w < window {
        bail!(Domain, "image {}x{} smaller than window {}", h, w, window);
    }
    let px = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        image.data()[y * w + x] as f64
    };
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (px(y, x + 1) - px(y, x - 1));
            let gy = 0.5 * (px(y + 1, x) - px(y - 1, x));
            mag[y as usize * w + x as usize] = math::sqrt(gx * gx + gy * gy);
        }
    }
    let r = (window / 2) as isize;
    let count = (window * window) as f64;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let v = mag[yy * w + xx];
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            out[y as usize * w + x as usize] = (var - epsilon) as f32;
        }
    }
    Grid::new(&[1, h, w], out)
}

/// Per-pixel loss multipliers `1 + max(HSV, 0)` computed on the channel mean
/// of `x0`, repeated across channels.
pub fn hsv_pixel_weights(x0: &Grid, cfg: &KernelConfig) -> Result<Grid> {
    let (c, h, w) = x0.chw()?;
    let map = hsv_map(&x0.channel_mean()?, cfg.hsv_window, cfg.hsv_epsilon)?;
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend(map.data().iter().map(|&v| 1.0 + v.max(0.0)));
    }
    Grid::new(&[c, h, w], data)
}

/// One sample of the kernel-weighted objective: a clean image, its corrupted
/// version and the step that produced it.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub x0: Grid,
    pub xt: Grid,
    pub t: usize,
}

/// Regression target and variance for a sample: the posterior mean and
/// `σ_q²(t)` for `t >= 2`, or `x_0` and `β_1` for the decoder term at `t = 1`.
pub fn loss_target(sample: &LossSample, sched: &NoiseSchedule) -> Result<(Grid, f64)> {
    if sample.t == 1 {
        sample.x0.same_shape(&sample.xt)?;
        Ok((sample.x0.clone(), sched.beta(1)))
    } else {
        sched.posterior_params(&sample.x0, &sample.xt, sample.t)
    }
}

/// Bandwidth and per-sample weights `K(x_t, target)` for a batch.
pub fn batch_kernel_weights(
    xts: &[&Grid],
    targets: &[&Grid],
    cfg: &KernelConfig,
) -> Result<(f64, Vec<f64>)> {
    if xts.len() != targets.len() {
        bail!(Shape, "{} inputs vs {} targets", xts.len(), targets.len());
    }
    let pairs: Vec<(&Grid, &Grid)> = xts.iter().copied().zip(targets.iter().copied()).collect();
    let sigma = resolve_bandwidth(&pairs, cfg)?;
    let weights = pairs
        .iter()
        .map(|(a, b)| Ok(rbf_from_dist_sq(a.dist_sq(b)?, sigma)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((sigma, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub loss: f64,
    pub sigma: f64,
    pub weights: Vec<f64>,
    /// Unweighted per-sample terms `‖μ_θ − target‖² / (2 var)`.
    pub terms: Vec<f64>,
}

/// Mean over the batch of `K_i · ‖μ_θ(x_t, t) − target‖² / (2 var)`.
pub fn kernel_weighted_loss<D: Denoiser + ?Sized>(
    batch: &[LossSample],
    denoiser: &D,
    sched: &NoiseSchedule,
    cfg: &KernelConfig,
) -> Result<WeightedLoss> {
    if batch.is_empty() {
        bail!(Domain, "empty batch");
    }
    let targets = batch
        .iter()
        .map(|s| loss_target(s, sched))
        .collect::<Result<Vec<_>>>()?;
    let xts: Vec<&Grid> = batch.iter().map(|s| &s.xt).collect();
    let tg: Vec<&Grid> = targets.iter().map(|(g, _)| g).collect();
    let (sigma, weights) = batch_kernel_weights(&xts, &tg, cfg)?;
    let mut terms = Vec::with_capacity(batch.len());
    for (i, (sample, (target, var))) in batch.iter().zip(&targets).enumerate() {
        let mean = denoiser.forward(&sample.xt, sample.t, None)?.mean;
        let sq = if cfg.hsv_loss_weight {
            let w = hsv_pixel_weights(&sample.x0, cfg)?;
            mean.sub(target)?.mul(&mean.sub(target)?)?.mul(&w)?.sum()
        } else {
            mean.dist_sq(target)?
        };
        let term = sq / (2.0 * var);
        if !term.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss term of sample {} is {}", i, term)));
        }
        terms.push(term);
    }
    let loss = weights.iter().zip(&terms).map(|(w, t)| w * t).sum::<f64>() / batch.len() as f64;
    Ok(WeightedLoss {
        loss,
        sigma,
        weights,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(v: &[f32]) -> Grid {
        Grid::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn rbf_analytic_cases() {
        let a = g(&[0.3, -1.0, 2.0]);
        assert_eq!(rbf_kernel(&a, &a, 0.7).unwrap(), 1.0);
        let v = rbf_kernel(&g(&[0.0, 0.0]), &g(&[3.0, 4.0]), 5.0).unwrap();
        assert!((v - libm::exp(-0.5)).abs() < 1e-12);
        // ‖a − b‖² = 2σ² with σ = 2: distance² 8.
        let v = rbf_kernel(&g(&[0.0, 0.0]), &g(&[2.0, 2.0]), 2.0).unwrap();
        assert!((v - libm::exp(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn rbf_rejects_bad_arguments() {
        assert!(matches!(rbf_kernel(&g(&[0.0]), &g(&[0.0, 1.0]), 1.0), Err(Error::Shape(_))));
        assert!(matches!(rbf_kernel(&g(&[0.0]), &g(&[1.0]), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn median_bandwidth_cases() {
        let cfg = KernelConfig::default();
        let a = g(&[0.0, 0.0]);
        let b = g(&[2.0, 2.0]);
        assert!((resolve_bandwidth(&[(&a, &b)], &cfg).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(resolve_bandwidth(&[(&a, &a), (&b, &b)], &cfg).unwrap(), cfg.sigma_floor);
        assert!(matches!(resolve_bandwidth(&[], &cfg), Err(Error::Domain(_))));
        let fixed = KernelConfig {
            policy: BandwidthPolicy::Fixed(0.25),
            ..cfg
        };
        assert_eq!(resolve_bandwidth(&[(&a, &b)], &fixed).unwrap(), 0.25);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = crate::rng::SeededRng::new(77);
        let grids: Vec<(Grid, Grid)> = (0..5)
            .map(|_| (g(&rng.normals(6)), g(&rng.normals(6))))
            .collect();
        let pairs: Vec<(&Grid, &Grid)> = grids.iter().map(|(a, b)| (a, b)).collect();
        let sigma = resolve_bandwidth(&pairs, &KernelConfig::default()).unwrap();
        // Oracle: brute-force pairwise distances, sorted by repeated selection.
        let mut d: Vec<f64> = grids
            .iter()
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum()
            })
            .collect();
        let mut sorted = Vec::new();
        while !d.is_empty() {
            let (i, _) = d
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            sorted.push(d.remove(i));
        }
        let want = (sorted[2] / 2.0).sqrt();
        assert!((sigma - want).abs() < 1e-12);
    }

    #[test]
    fn hsv_constant_image_is_minus_epsilon() {
        let img = Grid::full(&[1, 8, 8], 0.4);
        let m = hsv_map(&img, 3, 0.25).unwrap();
        assert!(m.data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn hsv_rejects_even_window() {
        let img = Grid::zeros(&[1, 8, 8]);
        assert!(matches!(hsv_map(&img, 4, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn hsv_step_edge_has_positive_band() {
        let img = Grid::from_fn(&[1, 12, 16], |i| if i % 16 >= 8 { 1.0 } else { -1.0 });
        let m = hsv_map(&img, 3, 0.0).unwrap();
        for y in 0..12 {
            for x in 6..=9 {
                assert!(m.at3(0, y, x) > 0.0, "({y},{x})");
            }
            for x in (0..5).chain(11..16) {
                assert_eq!(m.at3(0, y, x), 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn rbf_bounded_and_symmetric(
            a in proptest::collection::vec(-3.0f32..3.0, 5),
            b in proptest::collection::vec(-3.0f32..3.0, 5),
            sigma in 0.5f64..10.0,
            rot in 0usize..5,
        ) {
            let (ga, gb) = (g(&a), g(&b));
            let k = rbf_kernel(&ga, &gb, sigma).unwrap();
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert_eq!(k == 1.0, a == b);
            prop_assert_eq!(k, rbf_kernel(&gb, &ga, sigma).unwrap());
            let pa: Vec<f32> = (0..5).map(|i| a[(i + rot) % 5]).collect();
            let pb: Vec<f32> = (0..5).map(|i| b[(i + rot) % 5]).collect();
            let kp = rbf_kernel(&g(&pa), &g(&pb), sigma).unwrap();
            prop_assert!((k - kp).abs() < 1e-12);
        }

        #[test]
        fn hsv_is_translation_equivariant_in_the_interior(
            pix in proptest::collection::vec(-1.0f32..1.0, 20 * 20),
            shift in 1usize..4,
        ) {
            let img = Grid::new(&[1, 20, 20], pix.clone()).unwrap();
            let shifted = Grid::from_fn(&[1, 20, 20], |i| {
                let (y, x) = (i / 20, i % 20);
                pix[y * 20 + x.saturating_sub(shift)]
            });
            let a = hsv_map(&img, 3, 0.0).unwrap();
            let b = hsv_map(&shifted, 3, 0.0).unwrap();
            for y in 3..17 {
                for x in 3..(17 - shift) {
                    prop_assert_eq!(a.at3(0, y, x), b.at3(0, y, x + shift));
                }
            }
        }
    }
}
