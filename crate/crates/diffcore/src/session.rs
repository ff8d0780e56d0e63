use std::collections::HashMap;

use crate::error::Result;
use crate::graph::{Gradients, Graph, Var};
use crate::params::{ParameterStore, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch normalization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: 0.99, epsilon: 1e-3 }
    }
}

/// One forward/backward pass over a [`ParameterStore`].
///
/// Parameters are bound into the graph on first use; trainable weights become
/// differentiable leaves, frozen weights become constants.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s mut ParameterStore<T>,
    training: bool,
    bound: HashMap<String, Var>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParameterStore<T>, training: bool) -> Self {
        Session { graph: Graph::new(), store, training, bound: HashMap::new() }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let value = entry.value.clone();
        let v = if entry.is_optimized() { self.graph.leaf(value) } else { self.graph.constant(value) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Batch normalization reading `{prefix}.gamma/beta/moving_mean/moving_var`.
    ///
    /// In training mode the moving statistics are updated in the store. A
    /// layer whose `gamma` is frozen always runs on its moving statistics, so
    /// frozen sub-networks behave exactly as at inference time.
    pub fn batchnorm(&mut self, prefix: &str, x: Var, cfg: BatchNormConfig) -> Result<Var> {
        let gamma_name = format!("{prefix}.gamma");
        let frozen = !self.store.get(&gamma_name)?.trainable;
        let gamma = self.param(&gamma_name)?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.moving_mean");
        let var_name = format!("{prefix}.moving_var");
        let eps = T::from_f64_lossy(cfg.epsilon);
        if self.training && !frozen {
            let (y, mean, var) = self.graph.batchnorm_train(x, gamma, beta, eps)?;
            let mom = T::from_f64_lossy(cfg.momentum);
            for (name, batch) in [(&mean_name, &mean), (&var_name, &var)] {
                let e = self.store.get_mut(name)?;
                debug_assert_eq!(e.role, Role::Buffer);
                for (r, &b) in e.value.data_mut().iter_mut().zip(batch) {
                    *r = mom * *r + (T::one() - mom) * b;
                }
            }
            Ok(y)
        } else {
            let mean = self.store.value(&mean_name)?.data().to_vec();
            let var = self.store.value(&var_name)?.data().to_vec();
            self.graph.batchnorm_infer(x, gamma, beta, &mean, &var, eps)
        }
    }

    /// Runs the reverse sweep and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.graph.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                self.store.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(grads)
    }
}
