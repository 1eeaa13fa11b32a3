//! Scalar element types for tensors.
//!
//! Training and inference run in `f32`; the gradient oracle and metric
//! oracles run in `f64` for headroom.

use std::fmt::{Debug, Display};

use ndarray::LinalgScalar;
use num_traits::Float;

/// Floating-point element of a [`crate::tensor::Tensor`].
pub trait Elem: Float + LinalgScalar + Debug + Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
