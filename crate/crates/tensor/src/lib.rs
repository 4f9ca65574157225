//! Minimal dense-tensor engine for training small networks on the CPU.
//!
//! Values live on a [`Tape`] that is rebuilt on every forward pass; calling
//! [`Tape::backward`] on a scalar node walks the recorded operations in
//! reverse and returns a [`Gradients`] map keyed by the [`ParamId`]s that
//! were bound into the graph. Parameters live in a [`ParamStore`], updated
//! by [`Adam`], and persisted with the [`checkpoint`] container.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and `f64` for gradient checking.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, Entry};
pub use error::{Result, TensorError};
pub use gradcheck::finite_diff_grad;
pub use params::{Gradients, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
