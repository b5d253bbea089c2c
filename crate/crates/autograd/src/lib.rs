//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors, with the handful of kernels a convolution/attention recognizer
//! needs: GEMM-backed linear maps, 1-D/2-D convolutions, normalizations,
//! softmax, gathers and loss hooks.
//!
//! Ops panic on shape mismatches; callers validate user-facing geometry
//! before building a graph.

mod gemm;
pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::norm::BatchStats;
pub use ops::shape::{permute_data, GATHER_ZERO};
pub use tensor::{numel, Tensor};
