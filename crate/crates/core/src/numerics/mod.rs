//! Dense matrices, differentiable layer kernels, loss, Adam and
//! finite-difference gradient checking.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for gradient verification.

mod adam;
mod gradcheck;
pub(crate) mod layers;
mod matrix;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, MAX_COORDS_PER_TENSOR};
pub use layers::{
    cross_entropy, dropout_mask, gelu, gelu_backward, gelu_scalar, layer_norm, layer_norm_backward,
    softmax_backward, softmax_rows, LayerNormCache,
};
pub use matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Floating-point scalar used by the kernels.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Named trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            frozen: self.frozen,
        }
    }
}
