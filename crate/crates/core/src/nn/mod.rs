//! Layers wired to mask gates at weight, node, filter and subnetwork granularity.

pub mod batchnorm;
pub mod conv;
pub mod layers;
pub mod lstm;
pub mod residual;

pub use batchnorm::{BatchNorm, Mode};
pub use layers::{ConvUnit, Embedding, GateSettings, Linear};
pub use lstm::LstmCell;
pub use residual::ResidualBlock;
