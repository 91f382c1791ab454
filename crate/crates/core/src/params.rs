//! Named parameter registry backing a model.
//!
//! Layers hold [`ParamId`]s instead of data so that the optimizer,
//! checkpoint writer and forward graphs all see a single flat, ordered
//! list of tensors. Buffers (running statistics) live in the same
//! registry with `trainable = false`.

use crate::tensor::Tensor;

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat ordered collection of model parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_entry(name, value, true)
    }

    /// Non-trainable state (e.g. running statistics); serialized but never
    /// touched by the optimizer.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_entry(name, value, false)
    }

    fn add_entry(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Total element count of trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Total element count including buffers.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_order_and_lookup() {
        let mut ps = ParamStore::new();
        let a = ps.add("a.w", Tensor::zeros(&[2, 2]));
        let b = ps.add_buffer("a.run", Tensor::zeros(&[2]));
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.trainable_elements(), 4);
        assert_eq!(ps.total_elements(), 6);
        assert_eq!(ps.find("a.run"), Some(b));
        assert!(ps.get(a).trainable);
        assert!(!ps.get(b).trainable);
    }

    #[test]
    #[should_panic]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::zeros(&[1]));
        ps.add("w", Tensor::zeros(&[1]));
    }
}
