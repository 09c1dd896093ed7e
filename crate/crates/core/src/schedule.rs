//! Discrete Gaussian diffusion: variance schedule, forward corruption,
//! closed-form marginals and the true posterior `q(x_{t-1} | x_t, x_0)`.
//!
//! Step indices run `1..=T`; index `0` denotes the clean image and carries
//! `ᾱ_0 = 1`, so a marginal draw at `t = 0` returns `x_0` itself.

use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::grid::Grid;
use crate::math;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        bail!(Config, "schedule needs at least 2 steps, got {}", steps);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(
            Config,
            "betas must satisfy 0 < start <= end < 1, got {} and {}",
            beta_start,
            beta_end
        );
    }
    let span = (steps - 1) as f64;
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Schedule from an explicit β sequence (`β_t` at index `t - 1`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            bail!(Config, "schedule needs at least one step");
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            bail!(Config, "beta at step {} is {}, outside (0, 1)", i + 1, b);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0f64;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..alpha.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) * (1.0 - alpha[i]) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            bail!(Domain, "step {} outside {}..={}", t, lo, self.steps());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `σ_q²(t)`; zero at `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x_0 + ct·x_t`.
    pub fn posterior_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t, 2)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let a = self.alpha(t);
        let c0 = math::sqrt(ab_prev) * (1.0 - a) / (1.0 - ab);
        let ct = math::sqrt(a) * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    /// One forward transition `x_t = √α_t x_{t-1} + √(1-α_t) z`.
    pub fn forward_step(&self, x_prev: &Grid, t: usize, rng: &mut SeededRng) -> Result<Grid> {
        self.check(t, 1)?;
        let a = math::sqrt(self.alpha(t)) as f32;
        let s = math::sqrt(1.0 - self.alpha(t)) as f32;
        let z = rng.normals(x_prev.len());
        Grid::new(
            x_prev.shape(),
            x_prev.data().iter().zip(&z).map(|(&x, &z)| a * x + s * z).collect(),
        )
    }

    /// Closed-form marginal draw `√ᾱ_t x_0 + √(1-ᾱ_t) z`; `t = 0` returns
    /// `x_0` unchanged without consuming randomness.
    pub fn marginal_sample(&self, x0: &Grid, t: usize, rng: &mut SeededRng) -> Result<Grid> {
        self.check(t, 0)?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let z = Grid::new(x0.shape(), rng.normals(x0.len()))?;
        self.marginal_with_noise(x0, t, &z)
    }

    /// [`Self::marginal_sample`] with the standard-normal draw supplied.
    pub fn marginal_with_noise(&self, x0: &Grid, t: usize, noise: &Grid) -> Result<Grid> {
        self.check(t, 0)?;
        x0.same_shape(noise)?;
        let ab = self.alpha_bar(t);
        let a = math::sqrt(ab) as f32;
        let s = math::sqrt(1.0 - ab) as f32;
        x0.zip_map(noise, |x, z| a * x + s * z)
    }

    /// Mean and variance of `q(x_{t-1} | x_t, x_0)` for `2 <= t <= T`.
    pub fn posterior_params(&self, x0: &Grid, xt: &Grid, t: usize) -> Result<(Grid, f64)> {
        if t == 1 {
            return Err(Error::Domain("posterior at t = 1 is degenerate; the reconstruction term handles it".into()));
        }
        let (c0, ct) = self.posterior_coefs(t)?;
        let (c0, ct) = (c0 as f32, ct as f32);
        let mean = x0.zip_map(xt, |a, b| c0 * a + ct * b)?;
        Ok((mean, self.posterior_var(t)))
    }
}
