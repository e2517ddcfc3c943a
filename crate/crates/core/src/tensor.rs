//! Dense row-major matrices and vectors used by every attention path.
//!
//! All public operations return a fresh value and reject non-finite results,
//! so an overflow surfaces as [`TensorError::NonFinite`] instead of leaking
//! `inf`/`NaN` into later stages. Reductions run left to right over each row,
//! which keeps results bit-reproducible for a fixed input.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub mod meter;

/// Scalar element type. Implemented for `f64` (default) and `f32`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Storage width of one element.
    const BYTES: usize;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "double";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "single";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: buffer holds {actual} elements, shape needs {expected}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: result contains a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: operand has no columns")]
    Empty { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Dense row-major matrix.
pub struct Matrix<T: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    // Non-zero while this buffer is being tracked by an active `meter` frame.
    meter_epoch: u32,
}

impl<T: Real> Matrix<T> {
    fn with_data(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        let meter_epoch = meter::record_alloc(rows, cols);
        Self {
            rows,
            cols,
            data,
            meter_epoch,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::with_data(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::with_data(rows, cols, data))
    }

    /// Builds a matrix from row slices; every row must have the same length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::LengthMismatch {
                    op: "from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<T> {
        std::mem::take(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies rows `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(TensorError::DimensionMismatch {
                op: "row_block",
                left: self.shape(),
                right: (start + len, self.cols),
            });
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Self::with_data(len, self.cols, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::DimensionMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self::with_data(rows, cols, data))
    }

    /// Copies `src` into rows starting at `start`.
    pub fn write_rows(&mut self, start: usize, src: &Self) -> Result<()> {
        if src.cols != self.cols || start + src.rows > self.rows {
            return Err(TensorError::DimensionMismatch {
                op: "write_rows",
                left: self.shape(),
                right: src.shape(),
            });
        }
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out.data)?;
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        check_finite("matmul_transposed", &out.data)?;
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn transposed_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(TensorError::DimensionMismatch {
                op: "transposed_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("transposed_matmul", &out.data)?;
        Ok(out)
    }

    pub fn rowmax(&self) -> Result<Vector<T>> {
        if self.cols == 0 {
            return Err(TensorError::Empty { op: "rowmax" });
        }
        Ok(Vector::from_vec(
            (0..self.rows)
                .map(|r| self.row(r).iter().copied().fold(T::neg_infinity(), T::max))
                .collect(),
        ))
    }

    pub fn rowsum(&self) -> Result<Vector<T>> {
        if self.cols == 0 {
            return Err(TensorError::Empty { op: "rowsum" });
        }
        let out: Vec<T> = (0..self.rows).map(|r| sum_left(self.row(r))).collect();
        check_finite("rowsum", &out)?;
        Ok(Vector::from_vec(out))
    }

    /// Numerically stable row-wise softmax: each row is shifted by its max
    /// before exponentiation.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.cols == 0 {
            return Err(TensorError::Empty { op: "softmax_rows" });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            for x in row.iter_mut() {
                *x = (*x - m).exp();
            }
            let s = sum_left(row);
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        check_finite("softmax_rows", &out.data)?;
        Ok(out)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data: Vec<T> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite(op, &data)?;
        Ok(Self::with_data(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&a| a * s).collect();
        check_finite("scale", &data)?;
        Ok(Self::with_data(self.rows, self.cols, data))
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        check_finite("add_assign", &self.data)
    }

    /// Subtracts `v[r]` from every entry of row `r`.
    pub fn sub_row_broadcast(&self, v: &Vector<T>) -> Result<Self> {
        self.row_broadcast(v, "sub_row_broadcast", |a, b| a - b)
    }

    /// Multiplies row `r` by `v[r]`, i.e. `diag(v) · self`.
    pub fn scale_rows(&self, v: &Vector<T>) -> Result<Self> {
        self.row_broadcast(v, "scale_rows", |a, b| a * b)
    }

    /// Divides row `r` by `v[r]`, i.e. `diag(v)⁻¹ · self`.
    pub fn div_rows(&self, v: &Vector<T>) -> Result<Self> {
        self.row_broadcast(v, "div_rows", |a, b| a / b)
    }

    fn row_broadcast(&self, v: &Vector<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if v.len() != self.rows {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let s = v[r];
            for x in out.row_mut(r) {
                *x = f(*x, s);
            }
        }
        check_finite(op, &out.data)?;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&a| f(a)).collect();
        check_finite("map", &data)?;
        Ok(Self::with_data(self.rows, self.cols, data))
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.as_f64().abs()).fold(0.0, f64::max)
    }

    /// Converts element type, e.g. for mixed-precision comparisons.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix::with_data(
            self.rows,
            self.cols,
            self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        )
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn sum_left<T: Real>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc += x;
    }
    acc
}

impl<T: Real> Clone for Matrix<T> {
    fn clone(&self) -> Self {
        Self::with_data(self.rows, self.cols, self.data.clone())
    }
}

impl<T: Real> Drop for Matrix<T> {
    fn drop(&mut self) {
        if self.meter_epoch != 0 {
            meter::record_free(self.meter_epoch, self.rows * self.cols);
        }
    }
}

impl<T: Real> PartialEq for Matrix<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl<T: Real> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, x) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{x}")?;
            }
        }
        write!(f, "]")
    }
}

/// Dense vector. Unlike [`Matrix`] it may hold `-inf`, which is the initial
/// value of a running row maximum.
#[derive(Clone, PartialEq, Default)]
pub struct Vector<T: Real = f64> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    pub fn from_vec(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn filled(len: usize, v: T) -> Self {
        Self { data: vec![v; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self::filled(len, T::zero())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self::from_vec(self.data[start..start + len].to_vec())
    }

    pub fn concat(parts: &[Self]) -> Self {
        Self::from_vec(parts.iter().flat_map(|p| p.data.iter().copied()).collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Vector<U> {
        Vector::from_vec(self.data.iter().map(|x| U::from_f64(x.as_f64())).collect())
    }
}

impl<T: Real> std::ops::Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Real> std::ops::IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

impl<T: Real> fmt::Debug for Vector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.data).finish()
    }
}
