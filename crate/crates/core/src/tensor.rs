//! Dense row-major `f64` arrays.
//!
//! Most of the crate works with matrices (`[rows × cols]`); vectors are
//! accepted wherever a single row makes sense. Binary elementwise operations
//! broadcast a row vector or a scalar across the left operand and nothing
//! else.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest argument accepted by [`Tensor::exp`]; `exp(709.8)` is the last
/// finite `f64`.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Row,
    Scalar,
}

impl Broadcast {
    pub(crate) fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape == b.shape {
            Ok(Broadcast::Same)
        } else if b.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if b.len() == a.cols() && b.rows() == 1 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(
                op,
                format!("cannot combine {:?} with {:?}", a.shape, b.shape),
            ))
        }
    }

    #[inline]
    pub(crate) fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Scalar => 0,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    /// Leading dimension; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "max_abs_diff on unequal sizes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.shape.len() == 2 {
            Ok(())
        } else {
            Err(Error::shape(op, format!("expected a matrix, got {:?}", self.shape)))
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} × {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, false);
        Tensor::matrix(m, n, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul_t")?;
        other.require_matrix("matmul_t")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("inner dimensions differ: {:?} × {:?}ᵀ", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k), &mut out, false);
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let bc = Broadcast::resolve(op, self, other)?;
        let cols = self.cols();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, other.data[bc.index(i, cols)]))
            .collect();
        finite(
            op,
            Tensor {
                shape: self.shape.clone(),
                data,
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        finite("scale", self.map(|v| v * c))
    }

    /// Elementwise `exp`; any argument above [`EXP_LIMIT`] is an overflow error.
    pub fn exp(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v > EXP_LIMIT || v.is_nan()) {
            return Err(Error::Overflow { op: "exp" });
        }
        Ok(self.map(f64::exp))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        self.require_matrix("slice_rows")?;
        if len == 0 || start + len > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        let c = self.shape[1];
        Tensor::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        self.require_matrix("slice_cols")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Tensor::matrix(r, len, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no parts"))?
            .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            p.require_matrix("concat_rows")?;
            if p.cols() != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no parts"))?
            .rows();
        if parts.iter().any(|p| p.rows() != rows || p.shape.len() != 2) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(rows, cols, data)
    }

    /// Rows of `self` picked by `index`, in order.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        self.require_matrix("gather_rows")?;
        let c = self.shape[1];
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= self.shape[0] {
                return Err(Error::shape("gather_rows", format!("row {i} of {:?}", self.shape)));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(index.len(), c, data)
    }
}

pub(crate) fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Overflow { op })
    }
}

/// `c = a·b` (or `c += a·b`) for row-major buffers addressed by
/// `(row_stride, col_stride)` pairs, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
