//! Minimal dense tensor arithmetic with a define-by-run autodiff tape.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] and addressed through [`Var`] handles. Trainable state lives in a
//! [`ParamStore`] outside the tape so that one tape can be discarded per step
//! while parameters, gradients and optimizer moments persist.

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, StoredTensor, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{Precision, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
