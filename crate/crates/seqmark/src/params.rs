//! Named parameter storage.
//!
//! All trainable tensors live in one flat, insertion-ordered store. The order
//! is what checkpoint manifests record, and names double as the gradient-check
//! reporting groups.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    tensor: Tensor,
}

/// Flat collection of named parameters with gradient buffers.
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    /// Registers a tensor under a unique name; its gradient buffer is allocated.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        tensor.zero_grad();
        self.entries.push(ParamEntry { name, tensor });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a tensor initialized uniformly on [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape/data agree"))
    }

    /// Registers an all-ones tensor (used for norm gains).
    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::filled(shape, 1.0))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Iterates `(id, name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        self.entries[id.0].tensor.accumulate_grad(delta);
    }

    /// Copies out all parameter values (used to retain the best checkpoint).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.tensor.data().to_vec())
            .collect()
    }

    /// Restores values from a [`ParamStore::snapshot`].
    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot arity");
        for (e, values) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.tensor.numel(), values.len(), "snapshot shape");
            e.tensor.data_mut().copy_from_slice(values);
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
