//! Named storage for learnable parameters and non-learnable buffers.
//!
//! Layers hold [`ParamId`] handles into a single [`ParamStore`]; tapes bind
//! those handles to leaves, and the optimizer and checkpoint code walk the
//! store in insertion order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Learnable; receives gradients when `requires_grad` is set.
    Param,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub kind: EntryKind,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup, decay: bool) -> ParamId {
        self.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            group,
            kind: EntryKind::Param,
            decay,
        })
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        self.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_requires_grad(false),
            group,
            kind: EntryKind::Buffer,
            decay: false,
        })
    }

    fn push(&mut self, entry: ParamEntry) -> ParamId {
        debug_assert!(
            self.find(&entry.name).is_none(),
            "duplicate parameter name {}",
            entry.name
        );
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Parameters that currently receive gradients.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind == EntryKind::Param && e.tensor.requires_grad())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in &mut self.entries {
            if e.group == group && e.kind == EntryKind::Param {
                e.tensor.set_requires_grad(trainable);
            }
        }
    }

    /// Overwrites the value of `id`, keeping its shape.
    pub fn assign(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = self.get_mut(id);
        if t.numel() != values.len() {
            return Err(Error::dim(format!(
                "assigning {} values to parameter of shape {:?}",
                values.len(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn num_scalars(&self, kind: EntryKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.numel())
            .sum()
    }
}
