//! Conformally calibrated uncertainty sets for conditional robust
//! optimization: score models, calibration, robust reformulations, a
//! differentiable conic solver and the training loops that tie them together.

pub mod autodiff;
pub mod conformal;
pub mod error;
pub mod models;
pub mod optim;
pub mod problems;
pub mod reform;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{CroError, Result};
pub use tensor::Tensor;
