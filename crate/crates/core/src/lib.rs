//! Link-level simulation and learned CSI feedback for FDD MIMO-OFDM.

pub mod channel;
pub mod cmatrix;
pub mod error;
pub mod experiments;
pub mod linklevel;
pub mod networks;
pub mod sscc;

pub use cmatrix::ComplexMatrix;
pub use error::{CsiError, Result};
