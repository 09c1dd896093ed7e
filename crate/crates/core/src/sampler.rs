//! Reverse processes: plain ancestral sampling and mask-conditioned inpainting.
//!
//! Randomness is split into independent streams derived from the caller's
//! rng: stream 0 draws `x_T` and every reverse-step noise, stream 1 the forward
//! draws of the known image, stream 2 the re-noising between resampling
//! repeats. Inpainting with an all-unknown mask, every conditioning stage off
//! and no resampling therefore consumes stream 0 exactly like
//! [`sample_unconditional`] and returns the same bits.

use alloc::format;

use crate::conditioning::{CondFlags, ConditioningHook, MaskPyramid};
use crate::denoiser::{Denoiser, TapHook};
use crate::error::{bail, Error, Result};
use crate::grid::Grid;
use crate::kernel::KernelConfig;
use crate::math;
use crate::rng::SeededRng;
use crate::schedule::NoiseSchedule;

const STREAM_REVERSE: u64 = 0;
const STREAM_KNOWN: u64 = 1;
const STREAM_RENOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Extra re-noise-and-repeat passes per step; 0 disables resampling.
    pub resample_jumps: usize,
    pub flags: CondFlags,
    pub kernel: KernelConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            resample_jumps: 1,
            flags: CondFlags {
                lsc: true,
                ep_sites: 2,
                kernel_blend: false,
            },
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub image: Grid,
    /// Denoiser evaluations performed.
    pub forward_passes: usize,
}

/// Receives `x_{t-1}` after each completed step (`t` counts down to 1).
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &Grid);

/// Closed-form number of denoiser evaluations for one [`inpaint`] run.
pub fn expected_forward_passes(steps: usize, flags: &CondFlags, resample_jumps: usize) -> usize {
    steps * (1 + usize::from(flags.any())) * (1 + resample_jumps)
}

/// `x_infr` where `m = 0` and `x_cond` where `m = 1`.
pub fn blend_pixels(x_infr: &Grid, x_cond: &Grid, m: &Grid) -> Result<Grid> {
    x_infr.same_shape(x_cond)?;
    let (c, h, w) = x_infr.chw()?;
    let (mc, mh, mw) = m.chw()?;
    if mh != h || mw != w || (mc != 1 && mc != c) {
        bail!(Shape, "mask {:?} does not cover image {:?}", m.shape(), x_infr.shape());
    }
    check_binary(m)?;
    let n = h * w;
    let per_channel = mc == c;
    Ok(Grid::from_fn(x_infr.shape(), |i| {
        let mi = if per_channel { i } else { i % n };
        if m.data()[mi] == 1.0 {
            x_cond.data()[i]
        } else {
            x_infr.data()[i]
        }
    }))
}

fn check_binary(m: &Grid) -> Result<()> {
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        bail!(Domain, "mask values must be 0 or 1");
    }
    Ok(())
}

fn check_finite(x: &Grid, t: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("reverse process produced a non-finite value at step {}", t)))
    }
}

/// One reverse draw `x_{t-1} ~ N(μ, σ_t²)`; no noise is drawn at `t = 1`.
fn p_sample(mean: Grid, sched: &NoiseSchedule, t: usize, rng: &mut SeededRng) -> Grid {
    if t <= 1 {
        return mean;
    }
    let std = math::sqrt(sched.posterior_var(t)) as f32;
    let noise = rng.normals(mean.len());
    let mut out = mean;
    for (o, z) in out.data_mut().iter_mut().zip(noise) {
        *o += std * z;
    }
    out
}

/// Ancestral sampling from pure noise with no conditioning.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    rng: &SeededRng,
    mut observer: Option<StepObserver>,
) -> Result<SampleOutput> {
    let mut rev = rng.derive(STREAM_REVERSE);
    let shape = model.image_shape();
    let n = shape.iter().product();
    let mut x = Grid::new(&shape, rev.normals(n))?;
    let mut passes = 0;
    for t in (1..=sched.steps()).rev() {
        let mean = model.forward(&x, t, None)?.mean;
        passes += 1;
        x = p_sample(mean, sched, t, &mut rev);
        check_finite(&x, t)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, &x);
        }
    }
    Ok(SampleOutput {
        image: x,
        forward_passes: passes,
    })
}

/// Fills the unknown pixels (`m = 0`) of `x0` by the conditioned reverse
/// process. Only the known pixels of `x0` are ever read; the hidden ones are
/// zeroed before any use. Each step runs, in order: a pass on a forward draw
/// of the known image at `t`
/// to cache conditioned latents (only when some conditioning stage is on); the
/// hooked pass on `x_t` and a reverse draw; a forward draw of the known
/// image at `t − 1`;
/// and the pixel blend. With resampling, the blended `x_{t-1}` is pushed back
/// to `t` by one forward step and the step is repeated.
pub fn inpaint<D: Denoiser + ?Sized>(
    model: &D,
    x0: &Grid,
    m: &Grid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &SeededRng,
    mut observer: Option<StepObserver>,
) -> Result<SampleOutput> {
    let shape = model.image_shape();
    if x0.shape() != shape {
        bail!(Shape, "image {:?} does not match model input {:?}", x0.shape(), shape);
    }
    if m.shape() != [1, shape[1], shape[2]] {
        bail!(Shape, "mask {:?} must be [1, {}, {}]", m.shape(), shape[1], shape[2]);
    }
    check_binary(m)?;
    cfg.flags.validate()?;
    cfg.kernel.validate()?;
    let plane = m.len();
    let visible = Grid::from_fn(x0.shape(), |i| x0.data()[i] * m.data()[i % plane]);
    let x0 = &visible;
    let conditioned = cfg.flags.any();
    let masks = if conditioned {
        Some(MaskPyramid::new(m, &model.taps())?)
    } else {
        None
    };

    let mut rev = rng.derive(STREAM_REVERSE);
    let mut known = rng.derive(STREAM_KNOWN);
    let mut renoise = rng.derive(STREAM_RENOISE);
    let n = x0.len();
    let mut x = Grid::new(&shape, rev.normals(n))?;
    let mut passes = 0;
    for t in (1..=sched.steps()).rev() {
        for repeat in 0..=cfg.resample_jumps {
            if repeat > 0 {
                x = sched.forward_step(&x, t, &mut renoise)?;
            }
            let mean = match &masks {
                Some(masks) => {
                    let x_known = sched.marginal_sample(x0, t, &mut known)?;
                    let h_cond = model.forward(&x_known, t, None)?.taps;
                    passes += 1;
                    let mut hook = ConditioningHook::new(masks, &h_cond, cfg.flags, &cfg.kernel);
                    let hook: &mut dyn TapHook<f32> = &mut hook;
                    model.forward(&x, t, Some(hook))?.mean
                }
                None => model.forward(&x, t, None)?.mean,
            };
            passes += 1;
            let x_infr = p_sample(mean, sched, t, &mut rev);
            let x_cond = sched.marginal_sample(x0, t - 1, &mut known)?;
            x = blend_pixels(&x_infr, &x_cond, m)?;
            check_finite(&x, t)?;
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, &x);
        }
    }
    Ok(SampleOutput {
        image: x,
        forward_passes: passes,
    })
}

/// Convenience for callers that keep several masks: the known-pixel mask from
/// a hole mask (1 = missing).
pub fn known_from_hole(hole: &Grid) -> Result<Grid> {
    check_binary(hole)?;
    Ok(hole.map(|v| 1.0 - v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiseOutput, DenoiserConfig, TapInfo, TptDenoiser};
    use crate::schedule::build_schedule;
    use alloc::vec;
    use alloc::vec::Vec;

    /// One-pixel model `μ = a · x_t`.
    struct Affine(f32);

    impl Denoiser for Affine {
        fn image_shape(&self) -> [usize; 3] {
            [1, 1, 1]
        }
        fn taps(&self) -> Vec<TapInfo> {
            Vec::new()
        }
        fn forward(&self, xt: &Grid, _: usize, _: Option<&mut dyn TapHook<f32>>) -> Result<DenoiseOutput> {
            Ok(DenoiseOutput {
                mean: xt.scale(self.0),
                taps: Vec::new(),
            })
        }
    }

    fn small_model(seed: u64) -> TptDenoiser {
        let cfg = DenoiserConfig {
            level_channels: vec![4, 8],
            time_dim: 8,
            ff_mult: 2,
            mixer_hidden: 0,
            ..DenoiserConfig::new(1, 8, 8)
        };
        let mut rng = SeededRng::new(seed);
        let mut model = TptDenoiser::new(cfg, &mut rng).unwrap();
        let n = model.params().count();
        let flat: Vec<f32> = rng.normals(n).into_iter().map(|v| v * 0.2).collect();
        model.params_mut().assign_flat(&flat).unwrap();
        model
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn blend_pixels_cases() {
        let a = Grid::from_fn(&[2, 3, 3], |i| i as f32);
        let b = Grid::from_fn(&[2, 3, 3], |i| -(i as f32));
        assert_eq!(blend_pixels(&a, &b, &Grid::full(&[1, 3, 3], 1.0)).unwrap(), b);
        assert_eq!(blend_pixels(&a, &b, &Grid::zeros(&[1, 3, 3])).unwrap(), a);
        let checker = Grid::from_fn(&[1, 3, 3], |i| ((i / 3 + i % 3) % 2) as f32);
        let out = blend_pixels(&a, &b, &checker).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let want = if (x + y) % 2 == 1 { b.at3(c, y, x) } else { a.at3(c, y, x) };
                    assert_eq!(out.at3(c, y, x), want);
                }
            }
        }
        assert!(blend_pixels(&a, &b, &Grid::full(&[1, 3, 3], 0.5)).is_err());
        assert!(blend_pixels(&a, &b, &Grid::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn hidden_pixels_never_influence_the_output() {
        let mut rng = SeededRng::new(40);
        let model = small_model(41);
        let sched = build_schedule(5, 1e-3, 0.2).unwrap();
        let x0 = Grid::new(&[1, 8, 8], rng.normals(64)).unwrap();
        let m = Grid::from_fn(&[1, 8, 8], |i| (i % 8 < 5) as u8 as f32);
        let mut altered = x0.clone();
        for (v, &k) in altered.data_mut().iter_mut().zip(m.data()) {
            if k == 0.0 {
                *v = 5.0;
            }
        }
        let cfg = SamplerConfig {
            flags: CondFlags {
                lsc: true,
                ep_sites: 0,
                kernel_blend: true,
            },
            ..SamplerConfig::default()
        };
        let a = inpaint(&model, &x0, &m, &sched, &cfg, &SeededRng::new(3), None).unwrap();
        let b = inpaint(&model, &altered, &m, &sched, &cfg, &SeededRng::new(3), None).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn known_mask_everywhere_returns_input() {
        let model = small_model(1);
        let sched = build_schedule(6, 1e-3, 0.2).unwrap();
        let mut rng = SeededRng::new(2);
        let x0 = Grid::new(&[1, 8, 8], rng.normals(64)).unwrap();
        let cfg = SamplerConfig {
            flags: CondFlags {
                lsc: true,
                ep_sites: 0,
                kernel_blend: true,
            },
            ..SamplerConfig::default()
        };
        let out = inpaint(&model, &x0, &Grid::full(&[1, 8, 8], 1.0), &sched, &cfg, &rng, None).unwrap();
        assert_eq!(out.image, x0);
    }

    #[test]
    fn forward_counter_matches_closed_form() {
        let model = small_model(3);
        let sched = build_schedule(5, 1e-3, 0.2).unwrap();
        let rng = SeededRng::new(4);
        let x0 = Grid::zeros(&[1, 8, 8]);
        let mask = Grid::from_fn(&[1, 8, 8], |i| (i % 3 == 0) as u8 as f32);
        for (flags, jumps) in [
            (CondFlags::none(), 0),
            (CondFlags::none(), 2),
            (CondFlags { lsc: true, ep_sites: 0, kernel_blend: false }, 0),
            (CondFlags { lsc: true, ep_sites: 0, kernel_blend: true }, 1),
        ] {
            let cfg = SamplerConfig {
                resample_jumps: jumps,
                flags,
                kernel: KernelConfig::default(),
            };
            let out = inpaint(&model, &x0, &mask, &sched, &cfg, &rng, None).unwrap();
            assert_eq!(out.forward_passes, expected_forward_passes(5, &flags, jumps));
        }
    }

    #[test]
    fn unconditioned_inpaint_reproduces_plain_sampling() {
        let model = small_model(5);
        let sched = build_schedule(6, 1e-3, 0.2).unwrap();
        let rng = SeededRng::new(6);
        let x0 = Grid::full(&[1, 8, 8], 0.3);
        let cfg = SamplerConfig {
            resample_jumps: 0,
            flags: CondFlags::none(),
            kernel: KernelConfig::default(),
        };
        let a = inpaint(&model, &x0, &Grid::zeros(&[1, 8, 8]), &sched, &cfg, &rng, None).unwrap();
        let b = sample_unconditional(&model, &sched, &rng, None).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.forward_passes, b.forward_passes);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let model = small_model(7);
        let sched = build_schedule(4, 1e-3, 0.2).unwrap();
        let rng = SeededRng::new(8);
        let x0 = Grid::new(&[1, 8, 8], SeededRng::new(9).normals(64)).unwrap();
        let mask = Grid::from_fn(&[1, 8, 8], |i| (i < 32) as u8 as f32);
        let cfg = SamplerConfig {
            flags: CondFlags {
                lsc: true,
                ep_sites: 0,
                kernel_blend: false,
            },
            ..SamplerConfig::default()
        };
        let a = inpaint(&model, &x0, &mask, &sched, &cfg, &rng, None).unwrap();
        let b = inpaint(&model, &x0, &mask, &sched, &cfg, &rng, None).unwrap();
        assert_eq!(a, b);
        let other = inpaint(&model, &x0, &mask, &sched, &cfg, &SeededRng::new(10), None).unwrap();
        assert_ne!(a.image, other.image);
    }

    #[test]
    fn unknown_everywhere_matches_ancestral_oracle() {
        let sched = build_schedule(10, 0.01, 0.3).unwrap();
        let a = 0.9f32;
        // Variance recursion: v_T = 1, v_{t-1} = a² v_t + σ_t².
        let mut v = 1.0f64;
        for t in (1..=10).rev() {
            v = (a as f64).powi(2) * v + sched.posterior_var(t);
        }
        let cfg = SamplerConfig {
            resample_jumps: 0,
            flags: CondFlags::none(),
            kernel: KernelConfig::default(),
        };
        let x0 = Grid::full(&[1, 1, 1], 0.7);
        let m = Grid::zeros(&[1, 1, 1]);
        let runs = 10_000;
        let xs: Vec<f64> = (0..runs)
            .map(|i| {
                let rng = SeededRng::new(1000 + i);
                inpaint(&Affine(a), &x0, &m, &sched, &cfg, &rng, None).unwrap().image.data()[0] as f64
            })
            .collect();
        let (mean, var) = moments(&xs);
        let n = runs as f64;
        assert!(mean.abs() < 3.0 * (v / n).sqrt(), "mean {mean}");
        assert!((var - v).abs() < 3.0 * v * (2.0 / (n - 1.0)).sqrt(), "var {var} vs {v}");
    }

    #[test]
    fn zero_mean_model_ends_at_final_step_variance() {
        // With a zero mean every step, the output is the last reverse draw,
        // whose variance is σ_1² = 0: the result is exactly zero.
        let sched = build_schedule(8, 0.01, 0.3).unwrap();
        let mut rng = SeededRng::new(1);
        let model = TptDenoiser::new(
            DenoiserConfig {
                level_channels: vec![4, 8],
                time_dim: 8,
                ff_mult: 2,
                mixer_hidden: 0,
                ..DenoiserConfig::new(1, 8, 8)
            },
            &mut rng,
        )
        .unwrap();
        let out = sample_unconditional(&model, &sched, &rng, None).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.forward_passes, 8);
    }

    #[test]
    fn single_step_schedule_keeps_shape() {
        let sched = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        let rng = SeededRng::new(2);
        let mut seen = Vec::new();
        let mut obs = |t: usize, _: &Grid| seen.push(t);
        let out = sample_unconditional(&Affine(0.5), &sched, &rng, Some(&mut obs)).unwrap();
        assert_eq!(out.image.shape(), &[1, 1, 1]);
        assert_eq!(out.forward_passes, 1);
        assert_eq!(seen, vec![1]);
    }

    #[test]
    fn rejects_bad_masks() {
        let sched = build_schedule(3, 0.01, 0.3).unwrap();
        let rng = SeededRng::new(3);
        let x0 = Grid::zeros(&[1, 1, 1]);
        let cfg = SamplerConfig::default();
        let half = Grid::full(&[1, 1, 1], 0.5);
        assert!(matches!(inpaint(&Affine(1.0), &x0, &half, &sched, &cfg, &rng, None), Err(Error::Domain(_))));
        let wrong = Grid::zeros(&[1, 2, 1]);
        assert!(matches!(inpaint(&Affine(1.0), &x0, &wrong, &sched, &cfg, &rng, None), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_state_reports_step() {
        let sched = build_schedule(3, 0.01, 0.3).unwrap();
        let rng = SeededRng::new(4);
        let err = sample_unconditional(&Affine(f32::INFINITY), &sched, &rng, None).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("step 3"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
