use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Almost everything in the simulator is either a vector (`[n]`) or a matrix
/// (`[rows, cols]`); higher ranks are accepted but only matrix helpers exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor construction", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::dim(format!("row {i}"), cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (row count for matrices, length for vectors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing extent of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Self, scale: S) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dim(
                "elementwise add",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + scale * b)
                .collect(),
        })
    }

    pub fn dot(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> S {
        self.dot(self)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Self) -> Result<S> {
        if self.len() != other.len() {
            return Err(Error::dim("mse", self.len(), other.len()));
        }
        if self.is_empty() {
            return Ok(S::zero());
        }
        let sum: S = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(sum / S::lit(self.len() as f64))
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Converts element type, going through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// `x · Wᵀ + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub(crate) fn affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (batch, inp) = (x.rows(), x.cols());
    let out = w.rows();
    let mut data = Vec::with_capacity(batch * out);
    for i in 0..batch {
        let xr = &x.data[i * inp..(i + 1) * inp];
        for o in 0..out {
            let wr = &w.data[o * inp..(o + 1) * inp];
            let mut acc = b.data[o];
            for k in 0..inp {
                acc = acc + xr[k] * wr[k];
            }
            data.push(acc);
        }
    }
    Tensor {
        shape: vec![batch, out],
        data,
    }
}

/// `aᵀ · b` for `a: [B, m]`, `b: [B, n]` giving `[m, n]`.
pub(crate) fn outer_sum<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (batch, m, n) = (a.rows(), a.cols(), b.cols());
    let mut data = vec![S::zero(); m * n];
    for r in 0..batch {
        let ar = a.row(r);
        let br = b.row(r);
        for i in 0..m {
            if ar[i] == S::zero() {
                continue;
            }
            let dst = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + ar[i] * br[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data,
    }
}

/// `g · W` for `g: [B, out]`, `W: [out, in]` giving `[B, in]`.
pub(crate) fn back_project<S: Scalar>(g: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    let (batch, out) = (g.rows(), g.cols());
    let inp = w.cols();
    let mut data = vec![S::zero(); batch * inp];
    for r in 0..batch {
        let gr = g.row(r);
        let dst = &mut data[r * inp..(r + 1) * inp];
        for o in 0..out {
            if gr[o] == S::zero() {
                continue;
            }
            let wr = w.row(o);
            for k in 0..inp {
                dst[k] = dst[k] + gr[o] * wr[k];
            }
        }
    }
    Tensor {
        shape: vec![batch, inp],
        data,
    }
}

/// Column sums of a matrix.
pub(crate) fn column_sum<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let c = g.cols();
    let mut data = vec![S::zero(); c];
    for r in 0..g.rows() {
        for (d, &v) in data.iter_mut().zip(g.row(r)) {
            *d = *d + v;
        }
    }
    Tensor::vector(data)
}
