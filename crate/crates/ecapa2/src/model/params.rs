//! Named parameter storage with stable iteration order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// One stored tensor: trainable weights take part in optimization and
/// gradient checks, buffers (running statistics) do not.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered name -> tensor map. Iteration order is the order
/// parameters were registered in, which fixes checkpoint layout and makes
/// optimizer sweeps deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    entries: HashMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter '{name}'")));
        }
        self.names.push(name.to_string());
        self.entries.insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.names.iter().map(move |n| (n.as_str(), &self.entries[n]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Total element count over trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Total element count over every stored tensor, buffers included.
    pub fn num_total(&self) -> usize {
        self.iter().map(|(_, e)| e.tensor.numel()).sum()
    }
}
