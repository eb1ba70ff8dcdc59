//! Row-major f64 matrix with the handful of operations the crate needs.

use crate::error::{DpqError, Result};

/// Dense row-major matrix. `data[i * cols + j]` is element (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(DpqError::Dimension(format!(
                "matrix buffer has {} values, want {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DpqError::Numeric(format!(
                "non-finite value at flat index {pos} ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build without validation; callers guarantee length and finiteness.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, shapes checked. Accumulation order is fixed (k inner,
    /// ascending), so results are bitwise reproducible.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DpqError::Dimension(format!(
                "matmul {}x{} * {}x{}: inner dimensions differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copy of the column range `[c0, c1)` of every row.
    pub fn column_slice(&self, c0: usize, c1: usize) -> Result<Matrix> {
        if c0 > c1 || c1 > self.cols {
            return Err(DpqError::Dimension(format!(
                "column slice [{c0}, {c1}) out of range for {} columns",
                self.cols
            )));
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(self.rows * w);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[c0..c1]);
        }
        Ok(Matrix::from_raw(self.rows, w, data))
    }

    /// Copy of the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(DpqError::Dimension(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(idx.len(), self.cols, data))
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`, shapes checked.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(DpqError::Dimension(format!(
                "add {}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Plain sequential dot product; the single shared kernel for all distance
/// computations, so quantizer paths agree bit-for-bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Squared Euclidean distance with fixed accumulation order.
pub fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Euclidean distance.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    squared_dist(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_two_by_two() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(DpqError::Dimension(_))));
    }

    #[test]
    fn matmul_one_by_one_is_scalar_product() {
        let a = Matrix::new(1, 1, vec![3.0]).unwrap();
        let b = Matrix::new(1, 1, vec![-2.5]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-7.5]);
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(DpqError::Numeric(_))
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![f64::INFINITY, 0.0]),
            Err(DpqError::Numeric(_))
        ));
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(DpqError::Dimension(_))
        ));
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.get(0, 1), 4.0);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn matmul_against_naive_oracle() {
        // Independent triple loop in j-inner order with a fresh accumulator.
        fn naive(a: &Matrix, b: &Matrix) -> Vec<f64> {
            let mut out = vec![0.0; a.rows() * b.cols()];
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.cols() {
                        acc += a.get(i, k) * b.get(k, j);
                    }
                    out[i * b.cols() + j] = acc;
                }
            }
            out
        }
        let mut rng = crate::numerics::Rng::seeded(11);
        let a = Matrix::from_raw(4, 7, (0..28).map(|_| rng.normal()).collect());
        let b = Matrix::from_raw(7, 5, (0..35).map(|_| rng.normal()).collect());
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn column_slice_and_select_rows() {
        let a = Matrix::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let s = a.column_slice(1, 3).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0]);
        let r = a.select_rows(&[1, 0, 1]).unwrap();
        assert_eq!(r.rows(), 3);
        assert_eq!(r.row(0), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(r.row(2), r.row(0));
        assert!(a.column_slice(3, 2).is_err());
        assert!(a.select_rows(&[2]).is_err());
    }

    #[test]
    fn distance_helpers() {
        let a = [1.0, 0.0, -2.0];
        let b = [1.0, 3.0, 2.0];
        assert_eq!(squared_dist(&a, &b), 25.0);
        assert_eq!(dist(&a, &b), 5.0);
        assert_eq!(dot(&a, &b), -3.0);
        assert_eq!(dist(&a, &a), 0.0);
    }
}
