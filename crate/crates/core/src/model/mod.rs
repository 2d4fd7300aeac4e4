//! Network assembly from a [`ModelConfig`], parameter accounting and
//! checkpoint persistence.

pub mod checkpoint;
mod config;
mod network;

pub use checkpoint::TrainState;
pub use config::{ModelConfig, Variant};
pub use network::{DenseBlock, Model, ModelOutput, ParamTable};
