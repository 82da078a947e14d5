//! Tridiagonal systems: the Thomas solve used by the spline fit and the
//! finite element stepper.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Pivots below this magnitude are treated as singular.
pub const PIVOT_TOL: f64 = 1e-14;

/// Tridiagonal matrix stored as three bands. `lower[i]` sits at `(i+1, i)`,
/// `upper[i]` at `(i, i+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriDiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TriDiag {
    pub fn new(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>) -> Self {
        assert!(!diag.is_empty());
        assert_eq!(lower.len(), diag.len() - 1);
        assert_eq!(upper.len(), diag.len() - 1);
        TriDiag { lower, diag, upper }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Bands of the transposed matrix.
    pub fn transposed(&self) -> TriDiag {
        TriDiag {
            lower: self.upper.clone(),
            diag: self.diag.clone(),
            upper: self.lower.clone(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * x[i + 1];
            }
            y[i] = s;
        }
        y
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        solve_tridiagonal(&self.lower, &self.diag, &self.upper, rhs)
    }

    /// Solve against each column of a row-major `n x m` right-hand side.
    pub fn solve_columns(&self, rhs: &[f64], m: usize) -> Result<Vec<f64>> {
        let n = self.n();
        assert_eq!(rhs.len(), n * m);
        let mut out = vec![0.0; n * m];
        let mut col = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                col[i] = rhs[i * m + j];
            }
            let x = self.solve(&col)?;
            for i in 0..n {
                out[i * m + j] = x[i];
            }
        }
        Ok(out)
    }

    /// Dense representation, for oracles and debugging.
    pub fn to_dense(&self) -> crate::matrix::Matrix {
        let n = self.n();
        let mut m = crate::matrix::Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i + 1, i)] = self.lower[i];
                m[(i, i + 1)] = self.upper[i];
            }
        }
        m
    }
}

/// Thomas algorithm. Returns `x` with `A x = rhs` for the tridiagonal `A`
/// assembled from the three bands.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    assert_eq!(lower.len(), n.saturating_sub(1), "lower band length");
    assert_eq!(upper.len(), n.saturating_sub(1), "upper band length");
    assert_eq!(rhs.len(), n, "rhs length");

    let mut c = vec![0.0; n.saturating_sub(1)];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv.abs() < PIVOT_TOL {
        return Err(Error::SingularSystem { index: 0 });
    }
    if n > 1 {
        c[0] = upper[0] / piv;
    }
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i - 1] * c[i - 1];
        if piv.abs() < PIVOT_TOL {
            return Err(Error::SingularSystem { index: i });
        }
        if i + 1 < n {
            c[i] = upper[i] / piv;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n.saturating_sub(1)).rev() {
        let next = x[i + 1];
        x[i] -= c[i] * next;
    }
    Ok(x)
}
