//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::HashMap;

use crate::autograd::{Graph, Grads, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.lookup.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    /// He-initialised `out × in × k × k` convolution weight.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64, rng: &mut Rng) -> usize {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        self.insert(name, Tensor::randn(&[cout, cin, k, k], std, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor as a graph parameter, in store order.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Register every tensor as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Gradients of every bound tensor; zero where none flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads) -> Vec<Tensor> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Copy every tensor of `other` whose name exists here, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        dst.shape(),
                        t.shape()
                    )));
                }
                *dst = t.clone();
            }
        }
        Ok(())
    }
}

/// Graph variables for a bound [`ParamStore`], indexed like the store.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}
