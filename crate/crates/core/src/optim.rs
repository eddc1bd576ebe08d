//! Adam with bias correction.

use crate::param::ParamStore;
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            first: store.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            second: store.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated in `store`. Frozen
    /// parameters are not read or written.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(store.len(), self.first.len(), "optimizer built for another store");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::bitwise_eq;

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, -2.0]), true);
        let b = store.add("b", Tensor::vector(vec![0.5, 0.25]), false);
        let before = store.value(b).clone();
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            store.get_mut(a).grad.fill(1.0);
            store.get_mut(b).grad.fill(1.0);
            opt.step(&mut store);
        }
        assert!(bitwise_eq(store.value(b), &before));
        assert!(store.value(a).data()[0] < 1.0);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr·sign(g).
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]), true);
        store.get_mut(a).grad.fill(3.0);
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.step(&mut store);
        assert!((store.value(a).data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
