use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Sgd,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamStore`]: moment buffers in parameter order
/// plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub lr: f64,
    pub rule: UpdateRule,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, rule: UpdateRule) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Optimizer {
            lr,
            rule,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn adam(store: &ParamStore<T>, lr: f64) -> Self {
        Self::new(store, lr, UpdateRule::default())
    }

    pub fn sgd(store: &ParamStore<T>, lr: f64) -> Self {
        Self::new(store, lr, UpdateRule::Sgd)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's gradient buffers to its
    /// trainable parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(TensorError::OptimizerMismatch(format!(
                "{} moment buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (id, m) in store.ids().zip(&self.m) {
            if store.value(id).shape() != m.shape() {
                return Err(TensorError::OptimizerMismatch(format!(
                    "parameter {} has shape {:?}, state {:?}",
                    store.get(id).name,
                    store.value(id).shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let lr = T::of(self.lr);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let value = store.value_mut(id).data_mut();
            match self.rule {
                UpdateRule::Sgd => {
                    for (p, &g) in value.iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                UpdateRule::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::of(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::of(1.0 - beta2.powi(self.step as i32));
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for i in 0..value.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        value[i] -= lr * m_hat / (v_hat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers named after `store`'s parameters, for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (p, (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}.m.{}", p.name), m.clone()));
            out.push((format!("{prefix}.v.{}", p.name), v.clone()));
        }
        out
    }

    /// Restores moments saved by [`Optimizer::state_tensors`]. Missing
    /// buffers leave the state untouched for that parameter.
    pub fn restore(&mut self, store: &ParamStore<T>, prefix: &str, tensors: &[(String, Tensor<T>)], step: u64) -> Result<()> {
        for (k, p) in store.iter().enumerate() {
            for (slot, tag) in [(&mut self.m[k], "m"), (&mut self.v[k], "v")] {
                let name = format!("{prefix}.{tag}.{}", p.name);
                if let Some((_, t)) = tensors.iter().find(|(n, _)| *n == name) {
                    if t.shape() != slot.shape() {
                        return Err(TensorError::OptimizerMismatch(format!("{name}: {:?}", t.shape())));
                    }
                    *slot = t.clone();
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
