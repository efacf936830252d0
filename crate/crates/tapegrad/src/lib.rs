//! Reverse-mode automatic differentiation on a flat tape of `ndarray` tensors.
//!
//! The design is deliberately small: a [`Graph`] owns every intermediate
//! value, ops execute eagerly and record enough context to replay their
//! adjoint, and [`Graph::backward`] walks the tape once in reverse. The
//! whole engine is generic over [`Scalar`] so the same op definitions run
//! in `f32` for training and in `f64` for finite-difference shadow checks.

mod graph;
pub mod check;
pub mod nn;
pub mod optim;

pub use graph::{CellRect, Grads, Graph, Var};

/// Element type the tape is generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
