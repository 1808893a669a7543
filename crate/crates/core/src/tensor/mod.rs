//! Dense numeric core: value tensors, masks, a reverse-mode tape, AdamW and a
//! finite-difference gradient checker.
//!
//! All arithmetic is carried out in `f64`. Tensors are plain row-major values;
//! gradient tracking lives on the [`Tape`], which records every operation of a
//! forward pass and replays them in reverse on [`Tape::backward`].

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, LossAndGrad};
pub(crate) use ops::min_max_values;
pub use ops::{conv1d, layer_norm, masked_softmax, matmul, min_max_normalize, relu, sigmoid};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: every position is masked out")]
    AllMasked { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Views the tensor as a matrix: the last axis is the column axis and
    /// every leading axis folds into rows. A 1-D tensor is a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            n => (self.shape[..n - 1].iter().product(), self.shape[n - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().0
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-position validity flags. Arbitrary patterns are allowed; nothing
/// assumes the valid positions form a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(valid: Vec<bool>) -> Self {
        Self { valid }
    }

    pub fn all_valid(len: usize) -> Self {
        Self {
            valid: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    pub fn concat(masks: &[&Mask]) -> Mask {
        Mask {
            valid: masks.iter().flat_map(|m| m.valid.iter().copied()).collect(),
        }
    }

    /// Mask after a stride-2 reduction: a position stays valid when either
    /// of the two positions folding into it is valid.
    pub fn downsample2(&self) -> Mask {
        let out_len = self.valid.len().div_ceil(2);
        Mask {
            valid: (0..out_len)
                .map(|j| self.valid[2 * j] || self.valid.get(2 * j + 1).copied().unwrap_or(false))
                .collect(),
        }
    }
}

impl From<Vec<bool>> for Mask {
    fn from(valid: Vec<bool>) -> Self {
        Self::new(valid)
    }
}
