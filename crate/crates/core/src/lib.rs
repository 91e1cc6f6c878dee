//! Decomposed forward passes for small decoder-only transformers.
//!
//! The standard pass lives in [`transformer`]; [`decomposed`] splits the
//! residual stream into additive components and carries them through every
//! layer, [`attribution`] turns the final components into scores, and
//! [`eval`] measures how well those scores predict intervention effects.

// `!(x <= tol)` is how NaN fails a check; kernels index several arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attribution;
pub mod dataset;
pub mod decomposed;
pub mod error;
pub mod eval;
pub mod model_io;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Matrix;

pub type WeightSet32 = model_io::WeightSet<f32>;
pub type WeightSet64 = model_io::WeightSet<f64>;
pub type ForwardTrace32 = transformer::ForwardTrace<f32>;
pub type ForwardTrace64 = transformer::ForwardTrace<f64>;
pub type DecomposedState32 = decomposed::DecomposedState<f32>;
pub type DecomposedState64 = decomposed::DecomposedState<f64>;
pub type ProjectionMatrix32 = probes::ProjectionMatrix<f32>;
pub type ProjectionMatrix64 = probes::ProjectionMatrix<f64>;
