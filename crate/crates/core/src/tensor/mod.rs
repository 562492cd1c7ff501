//! Minimal dense rank-4 tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Everything the network touches is a [`Tensor4`] laid out batch-major:
//! `index = ((b * C + c) * H + y) * W + x`. Matrices are tensors with
//! `batch = channels = 1`. Compute is `f32` by default; every operation is
//! also instantiated at `f64` so gradients can be verified against central
//! finite differences.

mod element;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use element::Element;
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use tape::{GradGraph, Gradients, Var};

use crate::error::TensorError;
use std::fmt;

/// Dimensions of a [`Tensor4`]: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    /// Rank-2 matrix view: `rows x cols` stored as `1 x 1 x rows x cols`.
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape4::new(1, 1, rows, cols)
    }

    pub fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }

    fn valid(&self) -> bool {
        self.batch >= 1 && self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense rank-4 tensor. The data layout is fixed: batch-major, then channel,
/// then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<E> {
    shape: Shape4,
    data: Vec<E>,
}

impl<E: Element> Tensor4<E> {
    pub fn new(shape: Shape4, data: Vec<E>) -> Result<Self, TensorError> {
        if !shape.valid() {
            return Err(TensorError::invalid(
                "tensor",
                format!("all dimensions must be >= 1, got {shape}"),
            ));
        }
        if data.len() != shape.numel() {
            return Err(TensorError::invalid(
                "tensor",
                format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape4, value: E) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor4::full(Shape4::scalar(), value)
    }

    /// Rank-2 matrix constructor (`1 x 1 x rows x cols`).
    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self, TensorError> {
        Tensor4::new(Shape4::matrix(rows, cols), data)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Shape4) -> Result<Self, TensorError> {
        if shape.numel() != self.numel() || !shape.valid() {
            return Err(TensorError::shape("reshape", self.shape, shape));
        }
        Ok(Tensor4 {
            shape,
            data: self.data.clone(),
        })
    }

    /// Lossy element-type conversion (used to move between f32 compute and
    /// f64 verification, and to serialize checkpoints as f32).
    pub fn cast<F: Element>(&self) -> Tensor4<F> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64(v.into_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_batch_major() {
        let t = Tensor4::<f32>::from_fn(Shape4::new(2, 3, 4, 5), |b, c, y, x| {
            (((b * 3 + c) * 4 + y) * 5 + x) as f32
        });
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, i as f32);
        }
        assert_eq!(t.at(1, 2, 3, 4), (t.numel() - 1) as f32);
    }

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor4::<f32>::new(Shape4::new(0, 1, 1, 1), vec![]).is_err());
        assert!(Tensor4::<f32>::new(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor4::<f32>::from_fn(Shape4::new(1, 2, 2, 2), |_, c, y, x| {
            (c * 4 + y * 2 + x) as f32
        });
        let r = t.reshaped(Shape4::new(1, 1, 2, 4)).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(Shape4::new(1, 1, 3, 3)).is_err());
    }
}
