//! Dense float-64 tensors with shape metadata.
//!
//! A [`Tensor`] is an immutable value: every operation produces a new tensor.
//! Differentiable structure lives on a [`Tape`](crate::tape::Tape); a tensor
//! produced by a tape op carries the id of the node that computed it.

use rand::Rng;
use thiserror::Error;

use crate::tape::NodeId;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape extents must be positive, got {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    WrongRank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: tensor is not tracked on this tape")]
    NotOnTape { op: &'static str },
    #[error("{op}: tensor belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("bce: prediction {value} outside [0, 1]")]
    BceDomain { value: f64 },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense n-dimensional float-64 array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            node: None,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
            node: None,
        }
    }

    /// Rank-2 tensor from fixed-width rows; handy in tests.
    pub fn matrix<const C: usize>(rows: &[[f64; C]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * C);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![rows.len(), C],
            data,
            node: None,
        }
    }

    /// Samples every element from `U[lo, hi)` using the caller's generator.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_extent(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Tape node that produced this tensor, if it is tracked.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            })
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.rank() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(TensorError::WrongRank {
                op,
                rank: 2,
                shape: self.shape.clone(),
            })
        }
    }

    /// Element-wise map; the result is untracked.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            node: None,
        }
    }

    /// Element-wise combination of two same-shape tensors; untracked.
    pub fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            node: None,
        })
    }

    /// Copy of rows `start..start + len` of a rank-2 tensor; untracked.
    pub fn rows_range(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (rows, cols) = self.dims2("rows_range")?;
        if start + len > rows || len == 0 {
            return Err(TensorError::Invalid {
                op: "rows_range",
                msg: format!("rows {start}..{} out of 0..{rows}", start + len),
            });
        }
        Ok(Tensor {
            shape: vec![len, cols],
            data: self.data[start * cols..(start + len) * cols].to_vec(),
            node: None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor {
        self.node = Some(node);
        self
    }

    /// Same value with the tape link removed.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}

/// Boolean tensor used for attention masking; `true` marks a masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_vec(shape: Vec<usize>, data: Vec<bool>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Mask { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}
