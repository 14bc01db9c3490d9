//! Dense row-major tensors with a tape-based reverse-mode autodiff.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in
//! `f32` for training and in `f64` for gradient checks.

mod error;
pub mod gradcheck;
pub mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use ops::attention::{AttentionMaps, AttentionSpec};
pub use params::ParamStore;
pub use scalar::{gemm, MatMut, MatRef, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
