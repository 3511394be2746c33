use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Ordered collection of a model's parameters. The insertion order is the
/// serialization order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    key: u64,
    params: Vec<Param<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    /// Freezes or unfreezes every parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.requires_grad = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds this store's share of `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.for_store(self.key) {
            let p = &mut self.params[id.0];
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::of(factor);
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters in another precision. The store keeps its key so
    /// tapes built from either copy attribute gradients identically.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            key: self.key,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), &p.value)).collect()
    }
}
