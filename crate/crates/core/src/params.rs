//! Named parameter storage shared by all network modules.
//!
//! Slots are appended in construction order, which is deterministic for a
//! given model configuration; the optimizer and checkpoint writer iterate
//! slots by index so two runs see parameters in the same order.

use crate::rng;
use crate::tensor::Tensor;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let slot = self.values.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.values.push(value);
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, slot: usize) -> &ArrayD<f32> {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut ArrayD<f32> {
        &mut self.values[slot]
    }

    pub fn set(&mut self, slot: usize, value: ArrayD<f32>) {
        assert_eq!(self.values[slot].shape(), value.shape());
        self.values[slot] = value;
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// A tape leaf for this slot. With `trainable` false the leaf is a plain
    /// constant and the forward pass records no graph.
    pub fn leaf(&self, slot: usize, trainable: bool) -> Tensor {
        if trainable {
            Tensor::parameter(self.values[slot].clone(), slot)
        } else {
            Tensor::constant(self.values[slot].clone())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// He-style normal init scaled by fan-in; the default for conv and linear
/// weights feeding rectifying activations.
pub fn init_he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| (rng::normal(rng) * std) as f32)
}

/// Xavier-style init for attention projections.
pub fn init_xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f32> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| (rng::normal(rng) * std) as f32)
}

/// Small-amplitude init for positional embeddings.
pub fn init_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_fn(shape, |_| (rng::normal(rng) * 0.02) as f32)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(shape.to_vec())
}

pub fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::ones(shape.to_vec())
}
