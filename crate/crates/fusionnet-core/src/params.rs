//! Named parameter store shared by all models.
//!
//! Layers hold [`ParamId`] handles; the store owns the tensors. Trainable
//! entries receive gradients from the tape and are stepped by the
//! optimiser, non-trainable entries (batch-norm running statistics) are
//! plain state buffers that still serialise into checkpoints.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        tensor.requires_grad = trainable;
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(idx))
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

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Copy of all values, e.g. for best-validation checkpointing.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.tensor.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::invalid("snapshot does not match parameter store layout"));
        }
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            if e.tensor.numel() != s.len() {
                return Err(Error::invalid("snapshot entry shape mismatch"));
            }
            e.tensor.data_mut().copy_from_slice(s);
        }
        Ok(())
    }
}
