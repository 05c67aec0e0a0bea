//! Named parameter storage shared by optimizers, checkpoints, and forward passes.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::tensor::Tensor;

/// An ordered map of parameter name to tensor. Iteration order is the
/// lexicographic name order, which keeps every traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Inserts every parameter into `graph` as a gradient-tracking leaf and
    /// returns the name → node handle map used by forward builders.
    pub fn leaves(&self, graph: &mut Graph, requires_grad: bool) -> BTreeMap<String, TensorId> {
        self.entries
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone(), requires_grad)))
            .collect()
    }

    /// Content hash of all parameters (names, shapes, and raw values).
    /// Stable across runs; used for caching and provenance fields.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamStore { entries: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let h1 = a.content_hash();
        assert_eq!(h1, a.content_hash());
        a.get_mut("w").unwrap().data_mut()[0] = 1.5;
        assert_ne!(h1, a.content_hash());
    }
}
