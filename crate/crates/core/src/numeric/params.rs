use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors. Names iterate in sorted order, which fixes both
/// the node-id order on a tape and the optimizer update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.bind_where(tape, |_| trainable)
    }

    /// Places every tensor on `tape`; those whose name satisfies `trainable`
    /// receive gradients.
    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let nodes = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Binding { nodes }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Parameter names resolved to nodes of one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }

    /// Points `name` at another node of the same tape.
    pub fn set(&mut self, name: impl Into<String>, node: NodeId) {
        self.nodes.insert(name.into(), node);
    }

    /// Collects per-name gradients for the trainable entries.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Glorot-style normal initialisation for a `rows x cols` weight.
pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

pub fn init_glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    init_normal(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}
