//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] values are immutable and cheap to clone (the buffer is shared).
//! A [`Tape`] records operations on [`Var`] handles during a forward pass and
//! replays them in reverse in [`Tape::backward`]. Tapes are single-threaded;
//! run one tape per worker.

pub mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use tape::{Gradients, ParamGrad, Tape, Var};

use crate::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a length that does
    /// not match the shape, and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {} at index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], data)
    }

    /// Skips validation; callers guarantee the shape/length contract.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the buffer if another tensor shares it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn outer_len(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::shape(format!("{:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Copies the top-left `rows x cols` block of a 2-D tensor (or the first
    /// `cols` entries of a 1-D tensor, with `rows == 1`).
    pub fn crop(&self, rows: usize, cols: usize) -> Result<Self> {
        let (full_rows, full_cols) = self.as_matrix_dims();
        if rows == 0 || cols == 0 || rows > full_rows || cols > full_cols {
            return Err(Error::shape(format!(
                "cannot crop {:?} to {rows}x{cols}",
                self.shape
            )));
        }
        if rows == full_rows && cols == full_cols {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * full_cols..r * full_cols + cols]);
        }
        let shape = if self.rank() == 1 {
            vec![cols]
        } else {
            vec![rows, cols]
        };
        Ok(Tensor::from_parts(shape, out))
    }

    /// `(rows, cols)` of a rank-1 (`1 x n`) or rank-2 tensor.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("expected rank 1 or 2, got {other:?}"),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}
