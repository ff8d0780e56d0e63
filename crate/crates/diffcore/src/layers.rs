//! Layer definitions: parameter declaration plus forward application.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::params::{ParameterStore, Role};
use crate::scalar::Scalar;
use crate::session::{BatchNormConfig, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Selu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, sess: &mut Session<'_, T>, x: Var) -> Var {
        let g = &mut sess.graph;
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Selu => g.selu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Glorot-uniform tensor with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn declare_batchnorm<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], T::one()), Role::Weight)?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), Role::Weight)?;
    store.insert(&format!("{prefix}.moving_mean"), Tensor::zeros(&[channels]), Role::Buffer)?;
    store.insert(&format!("{prefix}.moving_var"), Tensor::full(&[channels], T::one()), Role::Buffer)?;
    Ok(())
}

/// Fully connected layer `[B, inputs] -> [B, outputs]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense { name: name.into(), inputs, outputs, activation }
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let w = glorot_uniform(&[self.inputs, self.outputs], self.inputs, self.outputs, rng);
        store.insert(&format!("{}.kernel", self.name), w, Role::Weight)?;
        store.insert(&format!("{}.bias", self.name), Tensor::zeros(&[self.outputs]), Role::Weight)
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(&format!("{}.kernel", self.name))?;
        let b = sess.param(&format!("{}.bias", self.name))?;
        let y = sess.graph.dense(x, w, b)?;
        Ok(self.activation.apply(sess, y))
    }
}

/// Convolution (or transposed convolution) optionally followed by batch
/// normalization, then an activation. Layers with batch normalization carry no
/// bias of their own.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub kernel: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
    pub stride: (usize, usize),
    pub transposed: bool,
    pub batchnorm: Option<BatchNormConfig>,
    pub activation: Activation,
}

impl Conv {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: (usize, usize)) -> Self {
        Conv {
            name: name.into(),
            kernel,
            c_in,
            c_out,
            stride: (1, 1),
            transposed: false,
            batchnorm: None,
            activation: Activation::Linear,
        }
    }

    pub fn stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn with_batchnorm(mut self, cfg: BatchNormConfig) -> Self {
        self.batchnorm = Some(cfg);
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [kh, kw, self.c_out, self.c_in]
        } else {
            [kh, kw, self.c_in, self.c_out]
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.name)
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let (kh, kw) = self.kernel;
        let w = glorot_uniform(&self.kernel_shape(), kh * kw * self.c_in, kh * kw * self.c_out, rng);
        store.insert(&self.kernel_name(), w, Role::Weight)?;
        if self.batchnorm.is_some() {
            declare_batchnorm(store, &format!("{}.bn", self.name), self.c_out)
        } else {
            store.insert(&format!("{}.bias", self.name), Tensor::zeros(&[self.c_out]), Role::Weight)
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let k = sess.param(&self.kernel_name())?;
        let y = if self.transposed {
            sess.graph.conv_transpose2d(x, k, self.stride)?
        } else {
            sess.graph.conv2d(x, k, self.stride)?
        };
        let y = match self.batchnorm {
            Some(cfg) => sess.batchnorm(&format!("{}.bn", self.name), y, cfg)?,
            None => {
                let b = sess.param(&format!("{}.bias", self.name))?;
                sess.graph.bias_add(y, b)?
            }
        };
        Ok(self.activation.apply(sess, y))
    }
}
