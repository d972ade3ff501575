//! Adaptive-moment optimizer with decoupled weight decay, over LoRA factors.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraBinding, LoraSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type AdapterKey = (LoraSet, LoraBinding);

/// Moments for one adapter. `step` counts the updates this adapter received,
/// which drives its bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot<S> {
    pub step: u64,
    pub m_down: Tensor<S>,
    pub v_down: Tensor<S>,
    pub m_up: Tensor<S>,
    pub v_up: Tensor<S>,
}

impl<S: Scalar> Slot<S> {
    pub fn zeros(adapter: &LoraAdapter<S>) -> Self {
        Self {
            step: 0,
            m_down: Tensor::zeros(adapter.down.shape()),
            v_down: Tensor::zeros(adapter.down.shape()),
            m_up: Tensor::zeros(adapter.up.shape()),
            v_up: Tensor::zeros(adapter.up.shape()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW<S> {
    slots: BTreeMap<AdapterKey, Slot<S>>,
}

/// Hyperparameters of one update.
#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for Hyper {
    fn from(c: &TrainConfig) -> Self {
        Self { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
    }
}

/// In-place update of one tensor given its moments and the 1-based step.
pub fn adam_update<S: Scalar>(p: &mut Tensor<S>, g: &Tensor<S>, m: &mut Tensor<S>, v: &mut Tensor<S>, h: &Hyper, step: u64) {
    let (b1, b2) = (S::c(h.beta1), S::c(h.beta2));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let corr1 = S::c(1.0 - h.beta1.powi(step as i32));
    let corr2 = S::c(1.0 - h.beta2.powi(step as i32));
    let (lr, eps, decay) = (S::c(h.lr), S::c(h.eps), S::c(h.lr * h.weight_decay));
    let (m, v) = (m.data_mut(), v.data_mut());
    for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
        m[i] = b1 * m[i] + one_b1 * gi;
        v[i] = b2 * v[i] + one_b2 * gi * gi;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        *x = *x - decay * *x - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        Self { slots: BTreeMap::new() }
    }

    pub fn slot(&self, key: &AdapterKey) -> Option<&Slot<S>> {
        self.slots.get(key)
    }

    pub fn slots(&self) -> impl Iterator<Item = (&AdapterKey, &Slot<S>)> {
        self.slots.iter()
    }

    pub fn insert(&mut self, key: AdapterKey, slot: Slot<S>) {
        self.slots.insert(key, slot);
    }

    /// One update of `adapter` from its factor gradients.
    pub fn step(&mut self, key: AdapterKey, adapter: &mut LoraAdapter<S>, grad_down: &Tensor<S>, grad_up: &Tensor<S>, h: &Hyper) -> Result<()> {
        if grad_down.shape() != adapter.down.shape() || grad_up.shape() != adapter.up.shape() {
            return Err(Error::Dimension(format!("gradient shapes do not match adapter {}", key.1)));
        }
        let slot = self.slots.entry(key).or_insert_with(|| Slot::zeros(adapter));
        slot.step += 1;
        adam_update(&mut adapter.down, grad_down, &mut slot.m_down, &mut slot.v_down, h, slot.step);
        adam_update(&mut adapter.up, grad_up, &mut slot.m_up, &mut slot.v_up, h, slot.step);
        Ok(())
    }
}
