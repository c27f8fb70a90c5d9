use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
///
/// Every product in the engine goes through [`Matrix::matmul`] and its
/// transposed variants, which accumulate each output entry as a single
/// running sum over the shared dimension in ascending index order. Results
/// are therefore bitwise reproducible and independent of how many rows are
/// stacked into one call.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} produced non-finite value {} at flat index {pos}", data[pos])));
    }
    Ok(())
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims must be >= 1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        check_finite(&data, "matrix construction")?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from literal rows. Panics on ragged or empty input, so
    /// use it for constants only.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.as_ref().len(), cols, "ragged rows");
                r.as_ref().iter().copied()
            })
            .collect();
        Self::new(rows.len(), cols, data).expect("invalid literal matrix")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be >= 1");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(v.is_finite());
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data: out }
    }

    /// `self · other`. Each entry is `Σ_k a[i,k]·b[k,j]` summed with `k`
    /// ascending.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("matmul: left is {}x{}, right is {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let bt = other.transpose();
        Ok(self.dot_rows(&bt, "matmul")?)
    }

    /// `selfᵀ · other` without forming the transpose of the left operand
    /// in the caller.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul: left is {}x{} (transposed), right is {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.transpose().dot_rows(&other.transpose(), "t_matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t: left is {}x{}, right is {}x{} (transposed)",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.dot_rows(other, "matmul_t")
    }

    // out[i,j] = Σ_k self[i,k]·rhs_rows[j,k], k ascending.
    fn dot_rows(&self, rhs_rows: &Matrix, what: &str) -> Result<Matrix> {
        let (n, m, inner) = (self.rows, rhs_rows.rows, self.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * inner..(i + 1) * inner];
            let dst = &mut out[i * m..(i + 1) * m];
            for (j, d) in dst.iter_mut().enumerate() {
                let b = &rhs_rows.data[j * inner..(j + 1) * inner];
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += a[k] * b[k];
                }
                *d = acc;
            }
        }
        check_finite(&out, what)?;
        Ok(Matrix { rows: n, cols: m, data: out })
    }

    fn zip_with(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        check_finite(&data, what)?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self + alpha·other`.
    pub fn add_scaled(&self, alpha: f64, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add_scaled", |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|v| alpha * v).collect();
        check_finite(&data, "scale")?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|v| f(*v)).collect();
        check_finite(&data, "map")?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of rows `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start >= range.end || range.end > self.rows {
            return Err(Error::Shape(format!("row slice {range:?} out of bounds for {} rows", self.rows)));
        }
        Ok(Matrix { rows: range.len(), cols: self.cols, data: self.data[range.start * self.cols..range.end * self.cols].to_vec() })
    }

    /// Stacks matrices vertically in the given order.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or_else(|| Error::Shape("vstack of nothing".into()))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!("vstack: {} cols vs {} cols", cols, p.cols)));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols;
        Ok(Matrix { rows, cols, data })
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert!(a.matmul(&Matrix::identity(2)).unwrap().bit_eq(&a));
    }

    #[test]
    fn matmul_small_example() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[17.0], [39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]);
        assert!(a.t_matmul(&b).unwrap().bit_eq(&a.transpose().matmul(&b).unwrap()));
        let c = Matrix::from_rows(&[[1.0, 0.0, 1.0]]);
        assert!(a.matmul_t(&c).unwrap().bit_eq(&a.matmul(&c.transpose()).unwrap()));
    }

    #[test]
    fn rejects_non_finite_and_bad_dims() {
        assert!(matches!(Matrix::new(1, 1, vec![f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(Matrix::new(0, 1, vec![]), Err(Error::Shape(_))));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::Shape(_))));
        let big = Matrix::filled(1, 1, 1e300);
        assert!(matches!(big.matmul(&big), Err(Error::Numeric(_))));
    }

    #[test]
    fn vstack_and_slice_roundtrip() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]);
        let s = Matrix::vstack(&[&a, &b]).unwrap();
        assert_eq!(s.rows(), 3);
        assert_eq!(s.slice_rows(1..3).unwrap(), b);
        assert!(s.slice_rows(2..4).is_err());
    }
}
