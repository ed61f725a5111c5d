//! Dense tensors, a reverse-mode tape with hand-written backward passes, Adam,
//! finite-difference gradient checking and binary checkpoints.

pub mod adam;
pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod param;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{gelu_scalar, pool_windows, sigmoid, softplus, Gradients, Graph, Var};
pub use memory::{set_threads, threads, PeakProbe};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
