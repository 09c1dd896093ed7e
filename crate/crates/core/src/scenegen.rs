//! Procedural satellite-like scenes: road networks over a smooth textured
//! background, and field mosaics of striped Voronoi plots.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math;
use crate::rng::SeededRng;
use crate::trainer::sample_training_mask;

/// Intensity of every road pixel.
pub const ROAD_LEVEL: f32 = 0.8;
/// Upper bound of the background under roads, keeping the two levels apart.
pub const BACKGROUND_MAX: f32 = 0.2;
const BACKGROUND_BASE: f32 = -0.4;
const NOISE_CELL: usize = 8;
const STRIPE_AMPLITUDE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Roads,
    Fields,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Road width in pixels.
    pub road_width: f64,
    /// Number of road polylines.
    pub road_count: usize,
    /// Number of field plots.
    pub plot_count: usize,
    /// Amplitude of the smooth background noise.
    pub noise_amplitude: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, height: usize, width: usize) -> Self {
        Self {
            kind,
            channels: 1,
            height,
            width,
            road_width: 2.0,
            road_count: 2,
            plot_count: 5,
            noise_amplitude: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            bail!(Config, "scene extents must be at least 16, got {}x{}", self.height, self.width);
        }
        if self.channels != 1 && self.channels != 3 {
            bail!(Config, "scenes have 1 or 3 channels, got {}", self.channels);
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            bail!(Config, "noise amplitude must be finite and non-negative");
        }
        match self.kind {
            SceneKind::Roads if !(self.road_width > 0.0) || self.road_count == 0 => {
                bail!(Config, "roads need a positive width and at least one road")
            }
            SceneKind::Fields if self.plot_count == 0 || self.plot_count > self.height * self.width => {
                bail!(Config, "plot count {} does not fit the image", self.plot_count)
            }
            _ => Ok(()),
        }
    }
}

/// Bilinearly interpolated uniform noise in `[-1, 1]` on a coarse lattice.
fn value_noise(h: usize, w: usize, rng: &mut SeededRng) -> Vec<f32> {
    let gh = h / NOISE_CELL + 2;
    let gw = w / NOISE_CELL + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / NOISE_CELL as f32;
        let (y0, ty) = (fy as usize, fy - (fy as usize) as f32);
        for x in 0..w {
            let fx = x as f32 / NOISE_CELL as f32;
            let (x0, tx) = (fx as usize, fx - (fx as usize) as f32);
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn point_on_border(h: usize, w: usize, rng: &mut SeededRng) -> (f64, f64) {
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let s = rng.uniform();
    match rng.below(4) {
        0 => (0.0, s * wf),
        1 => (hf, s * wf),
        2 => (s * hf, 0.0),
        _ => (s * hf, wf),
    }
}

fn segment_dist_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dy * dy + dx * dx;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len_sq).clamp(0.0, 1.0)
    };
    let (cy, cx) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    cy * cy + cx * cx
}

fn roads(spec: &SceneSpec, rng: &mut SeededRng) -> Grid {
    let (h, w) = (spec.height, spec.width);
    let noise = value_noise(h, w, rng);
    let mut plane: Vec<f32> = noise
        .iter()
        .map(|&n| (BACKGROUND_BASE + spec.noise_amplitude as f32 * n).clamp(-1.0, BACKGROUND_MAX))
        .collect();
    let half = spec.road_width / 2.0;
    let mut segments = Vec::new();
    for _ in 0..spec.road_count {
        // A border-to-border polyline bending once at an interior point.
        let a = point_on_border(h, w, rng);
        let b = point_on_border(h, w, rng);
        let mid = (rng.uniform_range(0.25, 0.75) * h as f64, rng.uniform_range(0.25, 0.75) * w as f64);
        segments.push((a, mid));
        segments.push((mid, b));
    }
    for y in 0..h {
        for x in 0..w {
            let p = (y as f64, x as f64);
            if segments.iter().any(|&(a, b)| segment_dist_sq(p, a, b) <= half * half) {
                plane[y * w + x] = ROAD_LEVEL;
            }
        }
    }
    // The polyline mid point is interior, so at least one road pixel exists.
    Grid::from_fn(&[spec.channels, h, w], |i| plane[i % (h * w)])
}

/// Nearest-seed labels, then every pixel not 4-connected to its own seed is
/// regrown from the connected parts so each plot is a single region.
pub fn voronoi_labels(h: usize, w: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if count == 0 || count > h * w {
        bail!(Domain, "cannot place {} plots in {}x{}", count, h, w);
    }
    let mut sites: Vec<usize> = Vec::with_capacity(count);
    while sites.len() < count {
        let p = rng.below(h * w);
        if !sites.contains(&p) {
            sites.push(p);
        }
    }
    let mut labels = vec![0usize; h * w];
    for (i, label) in labels.iter_mut().enumerate() {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, 0);
        for (k, &s) in sites.iter().enumerate() {
            let (sy, sx) = ((s / w) as i64, (s % w) as i64);
            let d = (y - sy).pow(2) + (x - sx).pow(2);
            if d < best.0 {
                best = (d, k);
            }
        }
        *label = best.1;
    }
    let neighbors = |i: usize| {
        let (y, x) = (i / w, i % w);
        [
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    };
    let mut settled = vec![false; h * w];
    let mut queue: VecDeque<usize> = sites.iter().copied().collect();
    for &s in &sites {
        settled[s] = true;
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbors(i) {
            if !settled[j] && labels[j] == labels[i] {
                settled[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut frontier: VecDeque<usize> = (0..h * w).filter(|&i| settled[i]).collect();
    while let Some(i) = frontier.pop_front() {
        for j in neighbors(i) {
            if !settled[j] {
                settled[j] = true;
                labels[j] = labels[i];
                frontier.push_back(j);
            }
        }
    }
    Ok(labels)
}

fn fields(spec: &SceneSpec, rng: &mut SeededRng) -> Result<(Grid, Vec<usize>)> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let labels = voronoi_labels(h, w, spec.plot_count, rng)?;
    struct Plot {
        base: [f32; 3],
        dir: (f32, f32),
        period: f32,
    }
    let plots: Vec<Plot> = (0..spec.plot_count)
        .map(|_| {
            let level = rng.uniform_range(-0.7, 0.7);
            let base = [0; 3].map(|_| (level + rng.uniform_range(-0.1, 0.1)) as f32);
            let angle = rng.uniform_range(0.0, core::f64::consts::PI);
            Plot {
                base,
                dir: (math::sin(angle) as f32, math::cos(angle) as f32),
                period: rng.uniform_range(3.0, 8.0) as f32,
            }
        })
        .collect();
    let noise = value_noise(h, w, rng);
    let amp = 0.5 * spec.noise_amplitude as f32;
    let two_pi = 2.0 * core::f32::consts::PI;
    let image = Grid::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let plot = &plots[labels[p]];
        let (y, x) = ((p / w) as f32, (p % w) as f32);
        let phase = two_pi * (y * plot.dir.0 + x * plot.dir.1) / plot.period;
        let stripe = STRIPE_AMPLITUDE * math::sin(phase as f64) as f32;
        let base = if c == 1 { plot.base[0] } else { plot.base[ch] };
        (base + stripe + amp * noise[p]).clamp(-1.0, 1.0)
    });
    Ok((image, labels))
}

/// Generates one scene with values in `[-1, 1]`; deterministic in `rng`.
pub fn generate_scene(spec: &SceneSpec, rng: &mut SeededRng) -> Result<Grid> {
    spec.validate()?;
    match spec.kind {
        SceneKind::Roads => Ok(roads(spec, rng)),
        SceneKind::Fields => fields(spec, rng).map(|(g, _)| g),
    }
}

/// A field scene with its per-pixel plot labels.
pub fn generate_fields_with_labels(spec: &SceneSpec, rng: &mut SeededRng) -> Result<(Grid, Vec<usize>)> {
    spec.validate()?;
    if spec.kind != SceneKind::Fields {
        bail!(Config, "labels exist only for field scenes");
    }
    fields(spec, rng)
}

/// A scene and a hole mask `[1, H, W]` (1 = hidden) covering `ratio` of the
/// pixels.
pub fn generate_eval_pair(spec: &SceneSpec, ratio: f64, rng: &mut SeededRng) -> Result<(Grid, Grid)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Domain, "mask ratio must lie in (0, 1), got {}", ratio);
    }
    let image = generate_scene(spec, rng)?;
    let mask = sample_training_mask(spec.height, spec.width, (ratio, ratio), rng)?;
    Ok((image, mask.hole))
}

/// Number of 4-connected regions of equal label.
pub fn count_regions(labels: &[usize], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut regions = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        regions += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let cand = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in cand.into_iter().flatten() {
                if !seen[j] && labels[j] == labels[i] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::hsv_map;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_scene() {
        for kind in [SceneKind::Roads, SceneKind::Fields] {
            let spec = SceneSpec::new(kind, 32, 32);
            let a = generate_scene(&spec, &mut SeededRng::new(4)).unwrap();
            let b = generate_scene(&spec, &mut SeededRng::new(4)).unwrap();
            let c = generate_scene(&spec, &mut SeededRng::new(5)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn roads_are_bimodal() {
        let spec = SceneSpec::new(SceneKind::Roads, 32, 32);
        for seed in 0..20 {
            let g = generate_scene(&spec, &mut SeededRng::new(seed)).unwrap();
            assert!(g.data().contains(&ROAD_LEVEL));
            assert!(g.data().iter().any(|&v| v <= BACKGROUND_MAX));
            assert!(g.data().iter().all(|&v| v == ROAD_LEVEL || v <= BACKGROUND_MAX));
        }
    }

    #[test]
    fn fields_have_exactly_the_plot_count() {
        for seed in 0..50 {
            for plots in [1, 5, 12] {
                let spec = SceneSpec {
                    plot_count: plots,
                    ..SceneSpec::new(SceneKind::Fields, 24, 32)
                };
                let (_, labels) = generate_fields_with_labels(&spec, &mut SeededRng::new(seed)).unwrap();
                assert_eq!(count_regions(&labels, 24, 32), plots);
            }
        }
    }

    #[test]
    fn degenerate_extents_rejected() {
        let spec = SceneSpec::new(SceneKind::Roads, 15, 32);
        assert!(generate_scene(&spec, &mut SeededRng::new(0)).is_err());
        let spec = SceneSpec {
            channels: 2,
            ..SceneSpec::new(SceneKind::Fields, 16, 16)
        };
        assert!(generate_scene(&spec, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn eval_pair_coverage() {
        let spec = SceneSpec::new(SceneKind::Roads, 32, 32);
        for seed in 0..50 {
            let (img, mask) = generate_eval_pair(&spec, 0.4, &mut SeededRng::new(seed)).unwrap();
            assert_eq!(img.shape(), &[1, 32, 32]);
            let cov = mask.mean();
            assert!((0.38..=0.42).contains(&cov), "{cov}");
            let (_, tiny) = generate_eval_pair(&spec, 0.01, &mut SeededRng::new(seed)).unwrap();
            assert!(tiny.sum() >= 1.0 && tiny.mean() <= 0.03);
        }
        let a = generate_eval_pair(&spec, 0.4, &mut SeededRng::new(9)).unwrap();
        let b = generate_eval_pair(&spec, 0.4, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(generate_eval_pair(&spec, 1.0, &mut SeededRng::new(9)).is_err());
    }

    #[test]
    fn roads_carry_more_structural_variance_than_fields() {
        let mean_hsv = |kind| {
            let spec = SceneSpec::new(kind, 32, 32);
            (0..20)
                .map(|s| {
                    let g = generate_scene(&spec, &mut SeededRng::new(s)).unwrap();
                    hsv_map(&g, 3, 0.0).unwrap().mean()
                })
                .sum::<f64>()
                / 20.0
        };
        let (r, f) = (mean_hsv(SceneKind::Roads), mean_hsv(SceneKind::Fields));
        assert!(r > 1.5 * f, "roads {r} fields {f}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn values_stay_in_range(seed in any::<u64>(), roads in any::<bool>(), rgb in any::<bool>(), amp in 0.0f64..3.0) {
            let kind = if roads { SceneKind::Roads } else { SceneKind::Fields };
            let spec = SceneSpec {
                channels: if rgb { 3 } else { 1 },
                noise_amplitude: amp,
                ..SceneSpec::new(kind, 16, 20)
            };
            let g = generate_scene(&spec, &mut SeededRng::new(seed)).unwrap();
            prop_assert!(g.min() >= -1.0 && g.max() <= 1.0);
        }
    }
}
