//! Dense tensor core.
//!
//! A deliberately small numeric layer: row-major `f32` tensors of rank 1 to 4,
//! the handful of operators the feature network needs, and a reverse-mode
//! [`Graph`] (in `f64`) for the trainable attention head.
//!
//! "Convolution" follows the deep-learning convention of cross-correlation:
//! kernels are not flipped.

mod graph;
pub(crate) mod kernels;
mod ops;

pub use graph::{Gradients, Graph, NodeId};
pub use ops::{
    activate, batchnorm, conv2d, crop, l2_normalize, l2_normalize_with_floor, maxpool,
    reflect_pad_to_even, softplus_scalar, upsample_nearest, Activation, BatchNormMode,
    RunningStats, BN_EPS, BN_MOMENTUM, NORM_FLOOR,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("rank {0} is outside the supported range 1..=4")]
    BadRank(usize),
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected shape {expected}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },
    #[error("{op}: window {k} larger than padded extent {padded}")]
    WindowTooLarge {
        op: &'static str,
        k: usize,
        padded: usize,
    },
    #[error("{op}: extent {extent} with kernel {k}, stride {stride}, padding {padding} gives a non-integer output size")]
    NonIntegerExtent {
        op: &'static str,
        extent: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: stride must be positive")]
    ZeroStride { op: &'static str },
    #[error("{op}: variance plus eps is not positive in channel {channel}")]
    NonPositiveVariance { op: &'static str, channel: usize },
    #[error("cannot normalize a vector with norm {norm:e} (floor {floor:e})")]
    DegenerateNorm { norm: f64, floor: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: output node must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward: operator {0} is not differentiable")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major tensor of 32-bit floats, rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking rank, length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(TensorError::BadRank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "rank must be 1..=4");
        assert!(value.is_finite());
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Internal constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// Like `from_parts`, but rejects non-finite output of an operator.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                expected: "[C, H, W]".into(),
                actual: self.shape.clone(),
            }),
        }
    }

    /// Value at `(c, i, j)` of a rank-3 tensor.
    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite");
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Mean over all elements, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }
}
