use std::fmt;
use std::iter::Sum;

/// Scalar element of a tensor. Implemented for `f32` (compute default) and
/// `f64` (verification mode for gradient checking).
pub trait Element:
    num_traits::Float + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn from_usize_(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }
}
