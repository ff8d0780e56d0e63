//! Adam and a reduce-on-plateau learning-rate schedule.

use crate::params::ParameterStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// Bias-corrected Adam update of every trainable weight. Gradients are left
    /// in place; callers clear them with [`ParameterStore::zero_grads`].
    pub fn step<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let eps = T::from_f64_lossy(self.eps);
        for (_, e) in store.iter_mut() {
            if !e.is_optimized() {
                continue;
            }
            e.step += 1;
            let t = e.step as i32;
            let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
            let lr = T::from_f64_lossy(self.lr);
            let (value, grad, m1, m2) = (e.value.data_mut(), e.grad.data(), e.m1.data_mut(), e.m2.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m1[i] = b1 * m1[i] + (T::one() - b1) * g;
                m2[i] = b2 * m2[i] + (T::one() - b2) * g * g;
                let mhat = m1[i] / c1;
                let vhat = m2[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        ReduceOnPlateau { factor, patience, best: f64::INFINITY, wait: 0 }
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            lr * self.factor
        } else {
            lr
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v), Role::Weight).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3, -7.0, 1e-3] {
            let mut s = scalar_store(1.0);
            s.get_mut("w").unwrap().grad = Tensor::scalar(g);
            Adam::new(0.01).step(&mut s);
            let moved = (s.value("w").unwrap().data()[0] - 1.0).abs();
            assert!((moved - 0.01).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(2.5);
        Adam::default().step(&mut s);
        assert_eq!(s.value("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn two_steps_match_reference() {
        let (lr, b1, b2, eps, g) = (0.05, 0.9, 0.999, 1e-8, 0.7);
        let mut s = scalar_store(0.0);
        let opt = Adam { lr, beta1: b1, beta2: b2, eps };
        let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=2 {
            s.get_mut("w").unwrap().grad = Tensor::scalar(g);
            opt.step(&mut s);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((s.value("w").unwrap().data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn frozen_weights_do_not_move() {
        let mut s = scalar_store(1.0);
        s.set_trainable("w", false);
        s.get_mut("w").unwrap().grad = Tensor::scalar(1.0);
        Adam::default().step(&mut s);
        assert_eq!(s.value("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn plateau_halves_every_twenty_flat_epochs() {
        let mut sched = ReduceOnPlateau::new(0.5, 20);
        let mut lr = 1e-3;
        let mut drops = Vec::new();
        for epoch in 1..=60 {
            let next = sched.observe(1.0, lr);
            if next < lr {
                drops.push(epoch);
            }
            lr = next;
        }
        assert_eq!(drops, vec![21, 41]);
        assert!((lr - 2.5e-4).abs() < 1e-15);
    }
}
