//! Named parameter storage shared by every network in a run.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as normalisation running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Ordered named tensors. Every store, clones included, carries a distinct
/// identity so that a graph can refuse to mix ids from two stores.
#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    uid: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), uid: next_uid() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { entries: self.entries.clone(), index: self.index.clone(), uid: next_uid() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, group, kind });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.numel()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrites the value of `name`, checking that the shape is unchanged.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name and shape also exist
    /// here. Returns how many entries were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &other.entries {
            if let Some(id) = self.id(&e.name) {
                if self.entries[id.0].value.shape() == e.value.shape() {
                    self.entries[id.0].value = e.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
