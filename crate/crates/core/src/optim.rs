//! Adaptive-moment optimizer with decoupled or coupled weight decay.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Decay applied to the weights directly, outside the adaptive scaling.
    AdamW,
    /// Decay added to the gradient before the moment updates.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps.
    pub steps: u64,
    /// First and second moments, one grid per parameter slot.
    pub m: Vec<Grid>,
    pub v: Vec<Grid>,
}

impl AdamState {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Grid> = params.iter().map(|(_, g)| Grid::zeros(g.shape())).collect();
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`. Only rank-2 tensors (weight
    /// matrices) are decayed; biases and normalization gains are not.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            bail!(Shape, "{} gradients and {} moment slots for {} parameters", grads.len(), self.m.len(), params.len());
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (self.beta1, self.beta2);
        for (slot, grad) in grads.iter().enumerate() {
            let p = params.slot_mut(slot);
            if grad.len() != p.len() {
                bail!(Shape, "gradient of length {} for parameter of length {}", grad.len(), p.len());
            }
            let decay = if p.rank() == 2 { self.weight_decay } else { 0.0 };
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let mut g = grad[i] as f64;
                let wf = *w as f64;
                if self.kind == OptimizerKind::Adam {
                    g += decay * wf;
                }
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / (math::sqrt(vi / bc2) + self.eps);
                let mut next = wf - lr * update;
                if self.kind == OptimizerKind::AdamW {
                    next -= lr * decay * wf;
                }
                *w = next as f32;
            }
        }
        Ok(())
    }
}
