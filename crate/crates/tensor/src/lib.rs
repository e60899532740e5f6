//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! The engine is deliberately small: NCHW convolutions (plain and
//! transposed), dense layers, elementwise maths, softmax and layer norm,
//! shape plumbing, reductions, stop-gradient and straight-through categorical
//! sampling, plus SGD and Adam with global-norm clipping. Everything is
//! generic over `f32` (training) and `f64` (gradient checks).

mod broadcast;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod real;
pub mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use nn::{Bound, ParamId, ParamStore};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, OptimizerState, StepStats};
pub use real::{DType, Real};
pub use tape::{sample_index, Gradients, Tape, Var};
pub use tensor::Tensor;
