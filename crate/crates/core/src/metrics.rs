//! Reconstruction quality measures: PSNR, masked MSE and windowed SSIM.

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math;

/// `10 log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Grid, b: &Grid, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(peak > 0.0) {
        bail!(Domain, "peak must be positive, got {}", peak);
    }
    if a.is_empty() {
        bail!(Shape, "psnr of empty grids");
    }
    let mse = a.dist_sq(b)? / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(peak * peak / mse))
}

/// Mean squared error over the pixels where `m = 1`. `m` is `[1, H, W]`
/// (shared by all channels) or has the image's shape.
pub fn masked_mse(a: &Grid, b: &Grid, m: &Grid) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = a.chw()?;
    let per_pixel = match m.shape() {
        [1, mh, mw] if *mh == h && *mw == w => true,
        s if s == a.shape() => false,
        s => bail!(Shape, "mask {:?} does not fit image {:?}", s, a.shape()),
    };
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        bail!(Domain, "mask values must be 0 or 1");
    }
    let plane = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..c * plane {
        let on = if per_pixel { m.data()[i % plane] } else { m.data()[i] };
        if on == 1.0 {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        bail!(Domain, "mask selects no pixels");
    }
    Ok(sum / count as f64)
}

/// Dynamic range of images in `[-1, 1]`.
pub const SSIM_PEAK: f64 = 2.0;

/// Mean structural similarity over all `window × window` placements inside
/// the image, with uniform weights, population statistics and stabilizers
/// `(0.01·2)²`, `(0.03·2)²`. Multi-channel inputs average the per-channel
/// values.
pub fn ssim(a: &Grid, b: &Grid, window: usize) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = a.chw()?;
    if window == 0 || window > h || window > w {
        bail!(Shape, "window {} does not fit {}x{}", window, h, w);
    }
    let c1 = (0.01 * SSIM_PEAK) * (0.01 * SSIM_PEAK);
    let c2 = (0.03 * SSIM_PEAK) * (0.03 * SSIM_PEAK);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - window {
            for x0 in 0..=w - window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        let u = a.at3(ch, y, x) as f64;
                        let v = b.at3(ch, y, x) as f64;
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn random(shape: &[usize], seed: u64) -> Grid {
        let mut rng = SeededRng::new(seed);
        let n: usize = shape.iter().product();
        Grid::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random(&[1, 4, 4], 1);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
        let z = Grid::zeros(&[1, 4, 4]);
        let b = Grid::full(&[1, 4, 4], 0.2);
        let mse = (0.2f32 as f64).powi(2);
        assert!((psnr(&z, &b, 2.0).unwrap() - 10.0 * libm::log10(4.0 / mse)).abs() < 1e-12);
        assert!((psnr(&z, &b, 2.0).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&z, &Grid::zeros(&[1, 4, 5]), 2.0).is_err());
    }

    #[test]
    fn psnr_matches_formula_oracle() {
        let a = random(&[3, 8, 8], 2);
        let b = random(&[3, 8, 8], 3);
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / 192.0;
        let oracle = 10.0 * libm::log10(4.0 / mse);
        assert!((psnr(&a, &b, 2.0).unwrap() - oracle).abs() <= 1e-9 * oracle.abs());
    }

    #[test]
    fn masked_mse_cases() {
        let a = random(&[1, 4, 4], 4);
        let m = Grid::full(&[1, 4, 4], 1.0);
        assert_eq!(masked_mse(&a, &a, &m).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[5] += 0.5;
        let mut one = Grid::zeros(&[1, 4, 4]);
        one.data_mut()[5] = 1.0;
        let got = masked_mse(&a, &b, &one).unwrap();
        let d = b.data()[5] as f64 - a.data()[5] as f64;
        assert_eq!(got, d * d);
        assert!((got - 0.25).abs() < 1e-6);
        assert!(masked_mse(&a, &b, &Grid::zeros(&[1, 4, 4])).is_err());
        assert!(masked_mse(&a, &b, &Grid::full(&[1, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn masked_mse_matches_loop_oracle() {
        let a = random(&[3, 6, 5], 5);
        let b = random(&[3, 6, 5], 6);
        let mut rng = SeededRng::new(7);
        let m = Grid::new(&[1, 6, 5], (0..30).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..5 {
                    if m.at3(0, y, x) == 1.0 {
                        sum += (a.at3(c, y, x) as f64 - b.at3(c, y, x) as f64).powi(2);
                        n += 1.0;
                    }
                }
            }
        }
        assert_eq!(masked_mse(&a, &b, &m).unwrap(), sum / n);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = random(&[1, 16, 16], 8);
        assert!((ssim(&a, &a, 7).unwrap() - 1.0).abs() < 1e-9);
        let pattern = Grid::from_fn(&[1, 16, 16], |i| if (i / 16 + i % 16) % 2 == 0 { 0.5 } else { -0.5 });
        let neg = pattern.scale(-1.0);
        assert!(ssim(&pattern, &neg, 4).unwrap() < 0.0);
        assert!(ssim(&a, &a, 17).is_err());
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = random(&[1, 16, 16], 9);
        let b = random(&[1, 16, 16], 10);
        let win = 7;
        let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
        let mut vals: Vec<f64> = vec![];
        for y0 in 0..=16 - win {
            for x0 in 0..=16 - win {
                let mut xs = vec![];
                let mut ys = vec![];
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        xs.push(a.at3(0, y, x) as f64);
                        ys.push(b.at3(0, y, x) as f64);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
                vals.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
        let oracle = vals.iter().sum::<f64>() / vals.len() as f64;
        let got = ssim(&a, &b, win).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle.abs(), "{got} vs {oracle}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random(&[1, 8, 8], s1);
            let b = random(&[1, 8, 8], s2);
            let m = Grid::full(&[1, 8, 8], 1.0);
            prop_assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
            prop_assert_eq!(masked_mse(&a, &b, &m).unwrap(), masked_mse(&b, &a, &m).unwrap());
            let s = ssim(&a, &b, 3).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((ssim(&a, &a, 3).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
