//! Central finite-difference check of analytic gradients.
//!
//! Every learnable operation must pass [`check_gradient`]: the analytic
//! gradient is compared per coordinate against
//! `(f(x + h e_i) - f(x - h e_i)) / (x_i^+ - x_i^-)` with
//! `h = 1e-3 * (1 + |x_i|)`. The denominator uses the perturbed coordinates
//! as actually stored, so `f32` rounding of `x_i ± h` does not bias the quotient.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::Real;
use crate::tape::{Tape, Var};

/// A scalar function of a grid with an analytic gradient.
pub trait Objective {
    fn value(&self, x: &Grid) -> Result<f64>;
    fn gradient(&self, x: &Grid) -> Result<Grid>;
}

/// A scalar function recorded on a tape. The same definition is evaluated in
/// `f64` for finite differences and in `f32` for the analytic gradient.
pub trait TapeFn {
    fn build<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Adapts a [`TapeFn`] into an [`Objective`].
pub struct TapeObjective<F>(pub F);

impl<F: TapeFn> Objective for TapeObjective<F> {
    fn value(&self, x: &Grid) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(x);
        let out = self.0.build(&mut tape, v)?;
        Ok(tape.value(out)[0])
    }

    fn gradient(&self, x: &Grid) -> Result<Grid> {
        let mut tape = Tape::<f32>::new();
        let v = tape.param(x);
        let out = self.0.build(&mut tape, v)?;
        let grads = tape.backward(out, &[1.0])?;
        match grads.get(v) {
            Some(g) => Grid::new(x.shape(), g.to_vec()),
            None => Ok(Grid::zeros(x.shape())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

fn perturbation(x: f32) -> f32 {
    1e-3 * (1.0 + x.abs())
}

/// Compares analytic and central-difference gradients at `coords` (all
/// coordinates when `None`). Relative error is `|a - n| / max(|a|, |n|, floor)`
/// where the floor `1e-8 * (1 + |f(x)|)` keeps exactly-zero gradients from
/// dividing by zero.
pub fn check_gradient<O: Objective + ?Sized>(
    f: &O,
    x: &Grid,
    coords: Option<&[usize]>,
) -> Result<GradReport> {
    let f0 = f.value(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("objective is {} at the base point", f0)));
    }
    let analytic = f.gradient(x)?;
    x.same_shape(&analytic)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let floor = 1e-8 * (1.0 + f0.abs());
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0f64;
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Domain(format!("coordinate {} out of range {}", i, x.len())));
        }
        let xi = x.data()[i];
        let h = perturbation(xi);
        let mut xp = x.clone();
        xp.data_mut()[i] = xi + h;
        let mut xm = x.clone();
        xm.data_mut()[i] = xi - h;
        let fp = f.value(&xp)?;
        let fm = f.value(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite when perturbing coordinate {}",
                i
            )));
        }
        let step = xp.data()[i] as f64 - xm.data()[i] as f64;
        let numeric = (fp - fm) / step;
        let a = analytic.data()[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel_error = (a - numeric).abs() / denom;
        max_rel_error = max_rel_error.max(rel_error);
        entries.push(GradEntry {
            index: i,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradReport {
        entries,
        max_rel_error,
    })
}
