//! Dense 32-bit-float tensors and reverse-mode differentiation.
//!
//! Storage is always row-major `f32`. Reductions whose dot products can
//! exceed a few thousand terms accumulate in `f64`; everything else stays in
//! `f32`. No implicit broadcasting: elementwise ops require equal shapes, and
//! only the batch-norm / bottleneck ops apply per-channel parameters.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::gradient_check;
pub use kernels::{ConvDims, PoolDims};
pub use tape::{Gradients, Tape, VarId};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: shape {lhs:?} does not match {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{context}: invalid shape {shape:?}")]
    InvalidShape { context: String, shape: Vec<usize> },
    #[error("tensor data length {got} does not match shape {shape:?} ({expected} elements)")]
    SizeMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("tape already consumed: backward may run at most once per recording")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0}")]
    InvalidArg(String),
}

/// A dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::SizeMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Deterministic Gaussian fill, mean 0 and the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE)).expect("std must be finite");
        let data = (0..shape.iter().product())
            .map(|_| dist.sample(rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform fill over `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::InvalidShape {
                context: format!("reshape of {:?} ({} elements)", self.shape, self.data.len()),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn dims2(&self, context: &str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            _ => Err(TensorError::InvalidShape {
                context: format!("{context}: expected rank 2"),
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims4(&self, context: &str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::InvalidShape {
                context: format!("{context}: expected rank 4 (NCHW)"),
                shape: self.shape.clone(),
            }),
        }
    }

    /// Stacks equal-shape tensors along a fresh leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self, TensorError> {
        let first = items.first().ok_or_else(|| {
            TensorError::InvalidArg("cannot stack an empty list of tensors".into())
        })?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    context: "stack".into(),
                    lhs: first.shape.clone(),
                    rhs: item.shape.clone(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Extracts row `index` along the leading axis.
    pub fn slice_leading(&self, index: usize) -> Result<Self, TensorError> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(TensorError::InvalidArg(format!(
                "leading index {index} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }
}

/// Sum of all elements, accumulated in f64.
pub fn sum_f64(data: &[f32]) -> f64 {
    data.iter().map(|&v| v as f64).sum()
}
