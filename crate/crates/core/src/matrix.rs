//! Dense row-major matrices with the factorizations needed by the
//! variational posterior and the solvers.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};

/// Dense matrix of 64-bit reals, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Column vector from a slice.
    pub fn col(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    /// 1x1 matrix.
    pub fn scalar(x: f64) -> Self {
        Matrix::from_vec(1, 1, vec![x])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterpret as a new shape with the same number of entries.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(self.data.len(), rows * cols, "reshape must preserve size");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn diag(&self) -> Vec<f64> {
        assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).collect()
    }

    /// Symmetry defect relative to the matrix scale.
    pub fn symmetry_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let scale = self.max_abs().max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Lower Cholesky factor of `self + jitter*I`, escalating the jitter by
    /// a factor of 10 up to 3 retries before giving up.
    pub fn cholesky(&self, jitter: f64) -> Result<Matrix> {
        assert!(self.is_square(), "cholesky requires a square matrix");
        debug_assert!(
            self.symmetry_defect() < 1e-10,
            "cholesky input must be symmetric"
        );
        let n = self.rows;
        let mut j = jitter;
        for attempt in 0..=3 {
            match self.cholesky_once(j) {
                Some(l) => return Ok(l),
                None => {
                    if j == 0.0 {
                        // escalating zero keeps it zero; retries cannot change the result
                        break;
                    }
                    if attempt < 3 {
                        j *= 10.0;
                    }
                }
            }
        }
        Err(Error::NotPositiveDefinite { size: n, jitter: j })
    }

    fn cholesky_once(&self, jitter: f64) -> Option<Matrix> {
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                if i == j {
                    s += jitter;
                }
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// Solve `L X = B` for lower-triangular `L`.
    pub fn solve_lower_triangular(&self, b: &Matrix) -> Matrix {
        assert!(self.is_square());
        assert_eq!(self.rows, b.rows, "triangular solve shape mismatch");
        let n = self.rows;
        let m = b.cols;
        let mut x = b.clone();
        for i in 0..n {
            for k in 0..i {
                let lik = self[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let v = x[(k, j)] * lik;
                    x[(i, j)] -= v;
                }
            }
            let d = self[(i, i)];
            for j in 0..m {
                x[(i, j)] /= d;
            }
        }
        x
    }

    /// Solve `U X = B` for upper-triangular `U`.
    pub fn solve_upper_triangular(&self, b: &Matrix) -> Matrix {
        assert!(self.is_square());
        assert_eq!(self.rows, b.rows, "triangular solve shape mismatch");
        let n = self.rows;
        let m = b.cols;
        let mut x = b.clone();
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let uik = self[(i, k)];
                if uik == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let v = x[(k, j)] * uik;
                    x[(i, j)] -= v;
                }
            }
            let d = self[(i, i)];
            for j in 0..m {
                x[(i, j)] /= d;
            }
        }
        x
    }

    /// `A^{-1} B` through the Cholesky factorization of `A = self`.
    pub fn cholesky_solve(&self, b: &Matrix, jitter: f64) -> Result<Matrix> {
        let l = self.cholesky(jitter)?;
        let y = l.solve_lower_triangular(b);
        Ok(l.transpose().solve_upper_triangular(&y))
    }

    /// Keep the lower triangle (including diagonal), zero the rest.
    pub fn tril(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                out[(i, j)] = 0.0;
            }
        }
        out
    }

    /// Keep the upper triangle (including diagonal), zero the rest.
    pub fn triu(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..i.min(self.cols) {
                out[(i, j)] = 0.0;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.6} ", self[(i, j)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn cholesky_identity_is_identity() {
        let l = Matrix::identity(2).cholesky(0.0).unwrap();
        assert_eq!(l, Matrix::identity(2));
    }

    #[test]
    fn cholesky_reconstructs_input() {
        let a = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let l = a.cholesky(0.0).unwrap();
        let back = l.matmul(&l.transpose());
        for i in 0..2 {
            for j in 0..2 {
                assert_close(back[(i, j)], a[(i, j)], 1e-12);
            }
        }
        assert!(l[(0, 0)] > 0.0 && l[(1, 1)] > 0.0);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // eigenvalues 3 and -1
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        match a.cholesky(0.0) {
            Err(Error::NotPositiveDefinite { size: 2, .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_jitter_escalation_recovers() {
        // barely indefinite; 1e-6 initial jitter is too small but x1000 fixes it
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0 - 1e-4]]);
        let l = a.cholesky(1e-6).unwrap();
        assert!(l[(1, 1)] > 0.0);
    }

    #[test]
    fn triangular_solves_invert_cholesky() {
        // dense inverse action oracle: Gauss-Jordan on a small SPD matrix
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 2.0]]);
        let b = Matrix::col(&[1.0, 2.0, 3.0]);
        let x = a.cholesky_solve(&b, 0.0).unwrap();
        let residual = a.matmul(&x).sub(&b).max_abs();
        assert!(residual < 1e-12, "residual {residual}");
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c, Matrix::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(a.transpose()[(0, 1)], 3.0);
    }
}
