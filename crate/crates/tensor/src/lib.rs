//! Small dense tensor library with define-by-run reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] that is rebuilt for every forward pass. Operations work on packed
//! row-major matrices; variable-length sequences are described by
//! [`Segments`] so that a batch never needs padding rows inside the tape.

mod attention;
pub mod check;
mod error;
mod float;
mod optim;
mod segments;
mod tape;
mod tensor;

pub use attention::AttentionWeights;
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use optim::{Adam, AdamConfig};
pub use segments::Segments;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
