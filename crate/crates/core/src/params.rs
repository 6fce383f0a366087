//! Named parameter collections and their gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered map of parameter name to tensor.
///
/// Iteration order is lexicographic by name; checkpoints and gradient
/// flattening both rely on it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.param(t.clone())))
            .collect();
        Bindings { vars }
    }

    /// Reads the scalar at flat coordinate `idx` across all tensors in order.
    pub fn flat_get(&self, idx: usize) -> f64 {
        let (name, off) = self.locate(idx);
        self.tensors[&name].data()[off]
    }

    pub fn flat_set(&mut self, idx: usize, value: f64) {
        let (name, off) = self.locate(idx);
        self.tensors.get_mut(&name).expect("located").data_mut()[off] = value;
    }

    /// Parameter name and offset of flat coordinate `idx`.
    pub fn locate(&self, mut idx: usize) -> (String, usize) {
        for (name, t) in &self.tensors {
            if idx < t.numel() {
                return (name.clone(), idx);
            }
            idx -= t.numel();
        }
        panic!("flat index out of range");
    }
}

/// Graph variables created by [`ParamSet::bind`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn maybe(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects the leaf gradients after [`Graph::backward`].
    pub fn grads(&self, g: &Graph) -> Grads {
        let tensors = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
                (name.clone(), grad)
            })
            .collect();
        Grads { tensors }
    }
}

/// Gradient buffers keyed like a [`ParamSet`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    tensors: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let tensors = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        Grads { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.tensors.insert(name.into(), values);
    }

    /// First non-finite entry, as `(name, offset)`.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors
            .iter()
            .find_map(|(k, g)| g.iter().position(|v| !v.is_finite()).map(|i| (k.clone(), i)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.tensors.iter_mut()
    }

    /// `self += other` for every shared name.
    pub fn add_assign(&mut self, other: &Grads) {
        for (name, g) in &mut self.tensors {
            if let Some(o) = other.tensors.get(name) {
                g.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.tensors.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flat value in [`ParamSet`] order.
    pub fn flat_get(&self, params: &ParamSet, idx: usize) -> f64 {
        let (name, off) = params.locate(idx);
        self.tensors.get(&name).map_or(0.0, |g| g[off])
    }
}
