//! Named parameter storage.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Owns every learnable (and frozen) tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Values are rounded to `f32` on entry.
    ///
    /// # Panics
    /// If the name is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: value.round_to_f32(),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value.round_to_f32();
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable || !trainable_only)
            .map(|e| e.value.numel())
            .sum()
    }
}
