//! Minimal dense-tensor autodiff: a tape of ops over [`Tensor`](crate::Tensor)
//! values with reverse-mode gradient accumulation.

mod graph;
mod kernels;
mod segments;

pub use graph::{BatchStats, BinaryKind, Graph, Var, EPS};
pub use segments::Segments;
