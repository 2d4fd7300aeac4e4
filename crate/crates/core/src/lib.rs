//! Dynamic multi-scale convolution for dialect identification.
//!
//! A D-TDNN backbone extended with dynamic kernel convolution, local
//! multi-scale learning and global multi-scale pooling, together with the
//! autodiff core it runs on, AAM-softmax training, and Cavg/EER scoring.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod binary;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Segments, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::Tensor;
