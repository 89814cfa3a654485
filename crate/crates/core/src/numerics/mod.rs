//! Dense-tensor computation with reverse-mode gradients, the Adam optimizer
//! and the cosine learning-rate schedule.
//!
//! The numeric substrate is generic over the scalar type: training runs in
//! `f32`, gradient verification and algebraic identity tests run in `f64`.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, numeric_gradient, GradCheckReport};
pub use graph::{Gradients, Graph, Op, Var};
pub use optim::{adam_update, cosine_lr, AdamConfig, OptimizerState};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating-point scalar usable inside tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
