//! Named parameter collections.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Trainable tensors keyed by unique name. Iteration order is the sorted name
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name, shape-matched to the parameters.
pub type GradientMap = BTreeMap<String, Tensor>;

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// `true` when both collections have the same names and shapes.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// The first name whose shape differs from `other`, or that is missing
    /// from either side.
    pub fn first_layout_mismatch(&self, other: &Parameters) -> Option<String> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                _ => return Some(name.clone()),
            }
        }
        other
            .names()
            .find(|n| !self.tensors.contains_key(n.as_str()))
            .cloned()
    }

    /// Largest absolute elementwise difference to a same-layout collection.
    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        assert!(self.same_layout(other), "parameter layouts differ");
        self.tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.sub(b).max_abs())
            .fold(0.0, f64::max)
    }
}

/// Euclidean norm of a whole gradient map.
pub fn grad_norm(grads: &GradientMap) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}
