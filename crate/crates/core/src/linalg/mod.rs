//! Dense row-major matrices and the handful of kernels the simulator needs.
//!
//! Everything is `f64`. Operations never mutate their inputs and every
//! fallible operation checks that its output is finite.

mod eigen;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eigen::{symmetric_eigen, symmetric_eigenvalues, SymmetricEigen, JACOBI_MAX_SWEEPS};

/// Maximum |a_ij - a_ji| accepted by the symmetric eigensolver.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Row-major real matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidData(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidData(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged or empty input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data).expect("from_rows: invalid matrix")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    /// Sets one entry. Non-finite values are rejected with a panic since they
    /// would break the finiteness invariant silently.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(value.is_finite(), "non-finite value {value} at ({i}, {j})");
        self.data[i * self.cols + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Selects the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        assert!(!indices.is_empty(), "select_rows needs at least one index");
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, alpha: f64) -> Result<Self> {
        let data = self.data.iter().map(|x| alpha * x).collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        scale_add(self, 1.0, other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        scale_add(self, 1.0, other, -1.0)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest |a - b| over matching entries. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        check_same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn max_asymmetry(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Ok(worst)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "mul_vec",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: v.len(),
                right_cols: 1,
            });
        }
        Ok(self
            .data
            .chunks(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Integer power of a square matrix by repeated squaring.
    pub fn powi(&self, exponent: u32) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let mut result = Self::identity(self.rows);
        let mut base = self.clone();
        let mut e = exponent;
        while e > 0 {
            if e & 1 == 1 {
                result = matmul(&result, &base)?;
            }
            e >>= 1;
            if e > 0 {
                base = matmul(&base, &base)?;
            }
        }
        Ok(result)
    }
}

fn check_same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op,
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    Ok(())
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    // i-k-j order: the inner loop runs over contiguous rows of b and out.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    DenseMatrix::new(m, n, out)
}

/// Sum of squared entries.
pub fn frobenius_norm_sq(a: &DenseMatrix) -> f64 {
    a.data.iter().map(|x| x * x).sum()
}

/// Elementwise `alpha * a + beta * b`.
pub fn scale_add(a: &DenseMatrix, alpha: f64, b: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
    check_same_shape("scale_add", a, b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    DenseMatrix::new(a.rows, a.cols, data)
}

/// Entries drawn i.i.d. from N(0, sigma^2) using `rng`.
pub fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<DenseMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidData(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DenseMatrix::new(rows, cols, data)
}

/// Weighted sum `sum_j weights[j] * mats[j]` over a non-empty set of equally
/// shaped matrices. Entries with zero weight are skipped.
pub fn weighted_sum(weights: &[f64], mats: &[&DenseMatrix]) -> Result<DenseMatrix> {
    assert_eq!(weights.len(), mats.len());
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("weighted_sum of no matrices".into()))?;
    let mut data = vec![0.0; first.data.len()];
    for (w, m) in weights.iter().zip(mats) {
        check_same_shape("weighted_sum", first, m)?;
        if *w == 0.0 {
            continue;
        }
        for (o, x) in data.iter_mut().zip(&m.data) {
            *o += w * x;
        }
    }
    DenseMatrix::new(first.rows, first.cols, data)
}

/// Arithmetic mean of equally shaped matrices.
pub fn mean(mats: &[&DenseMatrix]) -> Result<DenseMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of no matrices".into()))?;
    let mut data = vec![0.0; first.data.len()];
    for m in mats {
        check_same_shape("mean", first, m)?;
        for (o, x) in data.iter_mut().zip(&m.data) {
            *o += x;
        }
    }
    let n = mats.len() as f64;
    data.iter_mut().for_each(|x| *x /= n);
    DenseMatrix::new(first.rows, first.cols, data)
}
