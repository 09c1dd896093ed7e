//! Named parameter tensors in a fixed order.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Grid)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot. Names must be unique.
    pub fn push(&mut self, name: &str, value: Grid) -> Result<usize> {
        if self.index_of(name).is_some() {
            bail!(Config, "duplicate parameter name {}", name);
        }
        self.entries.push((name.to_string(), value));
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn slot(&self, i: usize) -> &Grid {
        &self.entries[i].1
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Grid {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, g)| g.len()).sum()
    }

    /// Scalar count of tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, g)| g.len())
            .sum()
    }

    /// Every parameter concatenated in slot order.
    pub fn flatten(&self) -> Grid {
        let mut data = Vec::with_capacity(self.count());
        for (_, g) in &self.entries {
            data.extend_from_slice(g.data());
        }
        let n = data.len();
        Grid::new(&[n], data).expect("flat length matches")
    }

    /// Overwrites every tensor from a flat vector laid out as by [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.count() {
            bail!(Shape, "flat vector of length {} for {} parameters", flat.len(), self.count());
        }
        let mut at = 0;
        for (_, g) in &mut self.entries {
            let n = g.len();
            g.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, g) in &mut self.entries {
            match other.get(name) {
                Some(src) if src.shape() == g.shape() => *g = src.clone(),
                Some(src) => bail!(Shape, "parameter {} has shape {:?}, expected {:?}", name, src.shape(), g.shape()),
                None => bail!(Domain, "parameter {} missing", name),
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, g)| if trainable { tape.param(g) } else { tape.constant(g) })
            .collect()
    }

    /// Views slices of an already-placed flat vector as the individual tensors.
    pub fn bind_flat<T: Real>(&self, tape: &mut Tape<T>, flat: Var) -> Result<Vec<Var>> {
        let mut at = 0u32;
        let mut out = Vec::with_capacity(self.entries.len());
        for (_, g) in &self.entries {
            let n = g.len() as u32;
            let index: alloc::sync::Arc<[u32]> = (at..at + n).collect();
            out.push(tape.gather(flat, index, g.shape())?);
            at += n;
        }
        Ok(out)
    }
}
