//! Training engine for differentiable mask pruning.

pub mod app;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod prune;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{DmpError, Result};
pub use tensor::Tensor;
