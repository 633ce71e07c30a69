//! Dense row-major tensors and a reverse-mode tape over them.
//!
//! [`Tensor`] is a plain value type. Differentiable computation happens on a
//! [`Graph`]: every primitive records its inputs and whatever it needs for the
//! reverse pass, and [`Graph::backward`] replays the record from the loss
//! back to the leaves.

mod backward;
pub(crate) mod graph;
pub(crate) mod kernels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::Gradients;
pub use graph::{Activation, Graph, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: slice has no unmasked entries")]
    DegenerateSlice { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass first")]
    AlreadyBackpropagated,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Arithmetic mode of a tape.
///
/// Storage is always `f64`. In `Single` mode every primitive output and every
/// propagated gradient is rounded through `f32`, which reproduces single
/// precision accumulation error at each operation boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    #[inline]
    pub(crate) fn round(self, values: &mut [f64]) {
        if self == Precision::Single {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
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
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&index));
            increment_index(&mut index, shape);
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = flat_index(&self.shape, index);
        self.data[at] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Physically reorders axes: output axis `a` is input axis `perm[a]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation("permute", perm, self.ndim())?;
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let data = kernels::permute(&self.data, &self.shape, perm);
        Ok(Self { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean tensor used for attention and pooling masks. `true` marks an
/// entry that participates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn all(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![true; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> bool) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&index));
            increment_index(&mut index, shape);
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Expands to `target` following right-aligned broadcasting: every mask
    /// axis must equal the target axis or be 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Vec<bool>> {
        let err = || TensorError::Shape {
            op: "mask broadcast",
            lhs: self.shape.clone(),
            rhs: target.to_vec(),
        };
        if self.shape.len() > target.len() {
            return Err(err());
        }
        if self.shape == target {
            return Ok(self.data.clone());
        }
        let offset = target.len() - self.shape.len();
        let own = strides(&self.shape);
        let mut bstrides = vec![0usize; target.len()];
        for (a, &len) in self.shape.iter().enumerate() {
            let t = target[a + offset];
            if len == t {
                bstrides[a + offset] = own[a];
            } else if len != 1 {
                return Err(err());
            }
        }
        let total: usize = target.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut index = vec![0usize; target.len()];
        for _ in 0..total {
            let at: usize = index.iter().zip(&bstrides).map(|(i, s)| i * s).sum();
            out.push(self.data[at]);
            increment_index(&mut index, target);
        }
        Ok(out)
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        out[a] = out[a + 1] * shape[a + 1];
    }
    out
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut at = 0;
    for (&i, &len) in index.iter().zip(shape) {
        assert!(i < len, "index {index:?} out of bounds for shape {shape:?}");
        at = at * len + i;
    }
    at
}

pub(crate) fn increment_index(index: &mut [usize], shape: &[usize]) {
    for a in (0..shape.len()).rev() {
        index[a] += 1;
        if index[a] < shape[a] {
            return;
        }
        index[a] = 0;
    }
}

pub(crate) fn check_permutation(op: &'static str, perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(TensorError::Shape {
            op,
            lhs: perm.to_vec(),
            rhs: vec![rank],
        });
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::Axis { op, axis: p, rank });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
