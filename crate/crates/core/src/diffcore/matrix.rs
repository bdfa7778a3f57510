use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

/// Dense double-precision matrix.
///
/// Storage is delegated to `nalgebra`; every constructor and operation
/// rejects non-finite entries so NaN/Inf never leave an operation silently.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    inner: DMatrix<f64>,
}

/// Entrywise operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Relu,
    Sigmoid,
    Sign,
    Clamp { lo: f64, hi: f64 },
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { inner: DMatrix::zeros(rows, cols) }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { inner: DMatrix::from_element(rows, cols, value) }
    }

    pub fn identity(n: usize) -> Self {
        Self { inner: DMatrix::identity(n, n) }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self { inner: DMatrix::from_fn(rows, cols, |i, j| f(i, j)) }
    }

    /// Builds a matrix from row-major data.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Self::checked(DMatrix::from_row_slice(rows, cols, data), "from_row_slice")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_slice(rows.len(), cols, &flat)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_row_slice(1, values.len(), values)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_row_slice(1, 1, &[value])
    }

    pub(crate) fn checked(inner: DMatrix<f64>, op: &str) -> Result<Self> {
        if inner.iter().all(|v| v.is_finite()) {
            Ok(Self { inner })
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    /// Writes one entry. Panics on non-finite values, like an out-of-bounds
    /// index would: both are programming errors at this level.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(value.is_finite(), "non-finite entry written at ({i}, {j})");
        self.inner[(i, j)] = value;
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.inner.row(i).iter().copied().collect()
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.rows() {
            out.extend(self.inner.row(i).iter());
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i)).collect()
    }

    /// Iterates entries in column-major storage order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.inner.iter()
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols() != other.rows() {
            return Err(Error::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        Self::checked(&self.inner * &other.inner, "matmul")
    }

    pub fn transpose(&self) -> Matrix {
        Self { inner: self.inner.transpose() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Self::checked(&self.inner + &other.inner, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Self::checked(&self.inner - &other.inner, "sub")
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Self::checked(self.inner.component_mul(&other.inner), "hadamard")
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        Self::checked(&self.inner * factor, "scale")
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Result<Matrix> {
        Self::checked(self.inner.map(f), "map")
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        self.inner += &other.inner;
        if self.inner.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("add_assign".into()));
        }
        Ok(())
    }

    pub fn relu(&self) -> Matrix {
        Self { inner: self.inner.map(|v| v.max(0.0)) }
    }

    pub fn sigmoid(&self) -> Matrix {
        Self { inner: self.inner.map(sigmoid) }
    }

    /// Entrywise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Matrix {
        Self { inner: self.inner.map(sign) }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Matrix> {
        if !(lo <= hi) {
            return Err(invalid(format!("clamp bounds reversed: lo {lo} > hi {hi}")));
        }
        Ok(Self { inner: self.inner.map(|v| v.clamp(lo, hi)) })
    }

    pub fn elementwise(&self, op: Elementwise, other: Option<&Matrix>) -> Result<Matrix> {
        let need = |name: &str| other.ok_or_else(|| invalid(format!("{name} needs a second operand")));
        match op {
            Elementwise::Add => self.add(need("add")?),
            Elementwise::Sub => self.sub(need("sub")?),
            Elementwise::Hadamard => self.hadamard(need("hadamard")?),
            Elementwise::Relu => Ok(self.relu()),
            Elementwise::Sigmoid => Ok(self.sigmoid()),
            Elementwise::Sign => Ok(self.sign()),
            Elementwise::Clamp { lo, hi } => self.clamp(lo, hi),
        }
    }

    pub fn sum(&self) -> f64 {
        self.inner.sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.inner.iter().zip(other.inner.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> usize {
        self.inner.iter().filter(|v| **v != 0.0).count()
    }

    pub fn column_sums(&self) -> Matrix {
        Self { inner: column_sums(&self.inner) }
    }

    pub fn column_means(&self) -> Matrix {
        let n = self.rows().max(1) as f64;
        Self { inner: column_sums(&self.inner) / n }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows() == self.cols() && self.inner == self.inner.transpose()
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        Self { inner: self.inner.rows(start, len).into_owned() }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols());
        if let Some(bad) = parts.iter().find(|m| m.cols() != cols) {
            return Err(Error::Shape { op: "vstack", left: (0, cols), right: bad.shape() });
        }
        let rows: usize = parts.iter().map(|m| m.rows()).sum();
        let mut inner = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for m in parts {
            inner.rows_mut(at, m.rows()).copy_from(&m.inner);
            at += m.rows();
        }
        Ok(Self { inner })
    }

    /// Adds `row` (1 x cols) to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::Shape { op: "add_row", left: self.shape(), right: row.shape() });
        }
        let mut inner = self.inner.clone();
        for mut r in inner.row_iter_mut() {
            r += &row.inner;
        }
        Self::checked(inner, "add_row")
    }
}

/// 1 x cols matrix of column sums.
pub(crate) fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix{:?} {:?}", self.shape(), self.to_rows())
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr { rows: self.rows(), cols: self.cols(), data: self.to_row_major() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        Matrix::from_row_slice(repr.rows, repr.cols, &repr.data).map_err(serde::de::Error::custom)
    }
}
