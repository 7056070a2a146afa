//! Named parameter storage, decoupled from any tape.
//!
//! Models keep their weights in a [`ParamStore`] (plain vectors, `Send`), and
//! each forward pass binds them to fresh leaf tensors. Binding with
//! `requires_grad = false` gives a gradient-free forward, which is how frozen
//! recognizers and teachers are run.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{cfg_err, dim_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; super::numel(shape)] }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.params.insert(name.into(), array);
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = super::numel(shape);
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Array { shape: shape.to_vec(), data });
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Array { shape: shape.to_vec(), data: vec![value; super::numel(shape)] });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.data.len()).sum()
    }

    pub fn bind(&self, requires_grad: bool) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|(k, a)| {
                let t = Tensor::try_new(a.data.clone(), &a.shape, requires_grad)
                    .expect("stored arrays always match their shapes");
                (k.clone(), t)
            })
            .collect();
        Bound { tensors }
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| ka == kb && a.shape == b.shape)
    }
}

/// Parameters bound to tensors for one forward/backward pass.
pub struct Bound {
    tensors: IndexMap<String, Tensor>,
}

impl Bound {
    /// Wraps existing tensors, e.g. probes built by a gradient check.
    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self { tensors: tensors.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| cfg_err!("missing parameter `{name}`"))
    }

    /// Gradients in store order; parameters untouched by the pass get zeros.
    pub fn grads(&self) -> Grads {
        Grads(
            self.tensors
                .values()
                .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect(),
        )
    }
}

/// Per-parameter gradients aligned with a store's iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(store.iter().map(|(_, a)| vec![0.0; a.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(dim_err!("gradient sets differ in length: {} vs {}", self.0.len(), other.0.len()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            super::add_assign(a, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}
