//! Minimal reverse-mode differentiation engine.
//!
//! Covers exactly the layers the CSI feedback networks need: dense layers,
//! same-padded strided convolutions and their transposes, batch
//! normalization, a handful of activations, and the complex-valued link
//! operations (pilot reception, flat-fading channel, MRC) that sit inside the
//! end-to-end graph. Values are `f32` for training and `f64` for gradient
//! checks.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod session;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Manifest, ParamMeta};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, grad_check_session, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Activation, Conv, Dense};
pub use optim::{Adam, ReduceOnPlateau};
pub use params::{ParamEntry, ParameterStore, Role};
pub use scalar::Scalar;
pub use session::{BatchNormConfig, Session};
pub use tensor::Tensor;
