//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every operation applied to tensors it owns; calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! accumulates gradients for every node, including named parameters bound
//! through [`Graph::param`]. The element type is generic so the same model
//! code can train in `f32` and be gradient-checked in `f64`.

pub mod check;
pub mod conv;
pub mod graph;
pub mod init;
pub mod optim;
pub mod ops;
pub mod params;

pub use graph::{Gradients, Graph, TensorId};
pub use params::{Binder, ParamMap, ParamSource};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar element type a graph can operate on. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
