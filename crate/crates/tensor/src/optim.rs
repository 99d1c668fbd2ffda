//! First-order optimizers.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with per-parameter bias correction.
///
/// Only parameters that appear in the gradient map are touched, so freezing
/// a subnet is simply not producing gradients for it.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, grad) in grads {
            let slot = self.moments.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                t: 0,
            });
            slot.t += 1;
            let b1t = 1.0 - self.beta1.powi(slot.t as i32);
            let b2t = 1.0 - self.beta2.powi(slot.t as i32);
            let p = store.get_mut(name);
            assert_eq!(p.shape(), grad.shape(), "grad shape mismatch for {name}");
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let m = &mut slot.m.data_mut()[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut slot.v.data_mut()[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn reset(&mut self) {
        self.moments.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3)
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get("x").item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)));
            opt.step(&mut store, &grads);
        }
        assert!((store.get("x").item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn untouched_params_stay_bitwise_identical() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.25));
        store.insert("b", Tensor::scalar(-0.5));
        let before = store.get("b").clone();
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        opt.step(&mut store, &grads);
        assert_eq!(store.get("b").data()[0].to_bits(), before.data()[0].to_bits());
        assert_ne!(store.get("a").item(), 1.25);
    }
}
