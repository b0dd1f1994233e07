//! Dense 4-D weight tensors, matrices, and the unfolding that maps one onto
//! the other.
//!
//! A convolution kernel is stored as a `(f1, f2, i, o)` array: kernel height,
//! kernel width, input channels, output channels, row-major. Unfolding merges
//! kernel height with input channels (rows) and kernel width with output
//! channels (columns):
//!
//! ```text
//! M[f1 * I + i, f2 * O + o] = W[f1, f2, i, o]
//! ```
//!
//! With this layout a folded `F1I x r` left factor is directly an
//! `(F1, 1, I, r)` kernel and a folded `r x F2O` right factor is an
//! `(1, F2, r, O)` kernel.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor. Arithmetic is always carried out in `f64`;
/// an `F32` tensor holds values that are exactly representable as `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn byte_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds `x` to this precision and widens back to `f64`.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extents of a convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub f1: usize,
    pub f2: usize,
    pub i: usize,
    pub o: usize,
}

impl Shape4 {
    pub fn new(f1: usize, f2: usize, i: usize, o: usize) -> Result<Self> {
        if f1 == 0 || f2 == 0 || i == 0 || o == 0 {
            return Err(Error::InvalidShape(format!(
                "({f1}, {f2}, {i}, {o}): every extent must be at least 1"
            )));
        }
        Ok(Shape4 { f1, f2, i, o })
    }

    pub fn from_array(dims: [usize; 4]) -> Result<Self> {
        Shape4::new(dims[0], dims[1], dims[2], dims[3])
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.f1, self.f2, self.i, self.o]
    }

    pub fn len(self) -> usize {
        self.f1 * self.f2 * self.i * self.o
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Row count of the unfolded matrix, `F1 * I`.
    pub fn unfolded_rows(self) -> usize {
        self.f1 * self.i
    }

    /// Column count of the unfolded matrix, `F2 * O`.
    pub fn unfolded_cols(self) -> usize {
        self.f2 * self.o
    }

    /// Shape with the (F1, I) and (F2, O) roles exchanged.
    pub fn swapped(self) -> Shape4 {
        Shape4 {
            f1: self.f2,
            f2: self.f1,
            i: self.o,
            o: self.i,
        }
    }

    #[inline]
    pub fn offset(self, f1: usize, f2: usize, i: usize, o: usize) -> usize {
        ((f1 * self.f2 + f2) * self.i + i) * self.o + o
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.f1, self.f2, self.i, self.o)
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// A convolution weight tensor in `(f1, f2, i, o)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    dtype: Precision,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Tensor4 {
            shape,
            dtype: Precision::F64,
            data,
        })
    }

    /// Builds a tensor tagged with `dtype`, rounding every value to it.
    pub fn with_dtype(shape: Shape4, dtype: Precision, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|x| *x = dtype.round(*x));
        let mut t = Tensor4::new(shape, data)?;
        t.dtype = dtype;
        Ok(t)
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            dtype: Precision::F64,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for a in 0..shape.f1 {
            for b in 0..shape.f2 {
                for c in 0..shape.i {
                    for d in 0..shape.o {
                        data.push(f(a, b, c, d));
                    }
                }
            }
        }
        Tensor4::new(shape, data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn dtype(&self) -> Precision {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    #[inline]
    pub fn get(&self, f1: usize, f2: usize, i: usize, o: usize) -> f64 {
        self.data[self.shape.offset(f1, f2, i, o)]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Rounds to `dtype` and retags.
    pub fn to_precision(&self, dtype: Precision) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            dtype,
            data: self.data.iter().map(|&x| dtype.round(x)).collect(),
        }
    }

    /// Tensor with the (F1, I) and (F2, O) roles exchanged:
    /// `out[f2, f1, o, i] = self[f1, f2, i, o]`. Its unfolding is the
    /// transpose of this tensor's unfolding.
    pub fn swap_roles(&self) -> Tensor4 {
        let s = self.shape;
        let t = s.swapped();
        let mut data = vec![0.0; s.len()];
        for f1 in 0..s.f1 {
            for f2 in 0..s.f2 {
                for i in 0..s.i {
                    for o in 0..s.o {
                        data[t.offset(f2, f1, o, i)] = self.get(f1, f2, i, o);
                    }
                }
            }
        }
        Tensor4 {
            shape: t,
            dtype: self.dtype,
            data,
        }
    }
}

/// Dense row-major matrix. Zero extents are allowed so that rank-0 factors
/// can be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for k in 0..n {
            m[(k, k)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (k, &d) in diag.iter().enumerate() {
            m[(k, k)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_same_dims(&self, rhs: &Matrix, op: &str) -> Result<()> {
        if self.dims() != rhs.dims() {
            return Err(Error::DimensionMismatch(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_dims(rhs, "add")?;
        Ok(self.zip_with(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_dims(rhs, "subtract")?;
        Ok(self.zip_with(rhs, |a, b| a - b))
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |r, c| self.data[r * self.cols + start + c])
    }

    /// Rounds every entry to `p`.
    pub fn to_precision(&self, p: Precision) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| p.round(x)).collect(),
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// General unfolding of `w` into an `F1*I x F2*O` matrix.
pub fn unfold(w: &Tensor4) -> Matrix {
    let s = w.shape();
    let cols = s.unfolded_cols();
    let mut data = vec![0.0; s.len()];
    for f1 in 0..s.f1 {
        for f2 in 0..s.f2 {
            for i in 0..s.i {
                let src = s.offset(f1, f2, i, 0);
                let dst = (f1 * s.i + i) * cols + f2 * s.o;
                data[dst..dst + s.o].copy_from_slice(&w.data()[src..src + s.o]);
            }
        }
    }
    Matrix {
        rows: s.unfolded_rows(),
        cols,
        data,
    }
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, shape: Shape4) -> Result<Tensor4> {
    if m.rows() != shape.unfolded_rows() || m.cols() != shape.unfolded_cols() {
        return Err(Error::DimensionMismatch(format!(
            "a {}x{} matrix does not fold to {shape} (needs {}x{})",
            m.rows(),
            m.cols(),
            shape.unfolded_rows(),
            shape.unfolded_cols()
        )));
    }
    let cols = m.cols();
    let mut data = vec![0.0; shape.len()];
    for f1 in 0..shape.f1 {
        for f2 in 0..shape.f2 {
            for i in 0..shape.i {
                let dst = shape.offset(f1, f2, i, 0);
                let src = (f1 * shape.i + i) * cols + f2 * shape.o;
                data[dst..dst + shape.o].copy_from_slice(&m.data()[src..src + shape.o]);
            }
        }
    }
    Tensor4::new(shape, data)
}

/// Stacks matrices top to bottom.
pub fn stack_vertical(ms: &[Matrix]) -> Result<Matrix> {
    let first = ms.first().ok_or(Error::EmptyStack)?;
    let cols = first.cols();
    if let Some((k, m)) = ms.iter().enumerate().find(|(_, m)| m.cols() != cols) {
        return Err(Error::DimensionMismatch(format!(
            "column mismatch: member {k} has {} columns, expected {cols}",
            m.cols()
        )));
    }
    let rows = ms.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in ms {
        data.extend_from_slice(m.data());
    }
    Ok(Matrix { rows, cols, data })
}

/// Stacks matrices left to right.
pub fn stack_horizontal(ms: &[Matrix]) -> Result<Matrix> {
    let first = ms.first().ok_or(Error::EmptyStack)?;
    let rows = first.rows();
    if let Some((k, m)) = ms.iter().enumerate().find(|(_, m)| m.rows() != rows) {
        return Err(Error::DimensionMismatch(format!(
            "row mismatch: member {k} has {} rows, expected {rows}",
            m.rows()
        )));
    }
    let cols = ms.iter().map(Matrix::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for m in ms {
            data.extend_from_slice(m.row(r));
        }
    }
    Ok(Matrix { rows, cols, data })
}
