//! Natural cubic spline interpolation, both as a plain data-derivative
//! estimator for gradient-matching and as a differentiable interpolant of
//! sampled force values.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;


/// Piecewise cubic `a + b*tau + c*tau^2 + d*tau^3` with natural boundary
/// conditions (zero second derivative at both ends).
#[derive(Clone, Debug)]
pub struct CubicSpline {
    knots: Vec<f64>,
    coeffs: Vec<[f64; 4]>,
}

fn validate_knots(t: &[f64]) -> Result<()> {
    if t.len() < 2 {
        return Err(Error::InvalidArgument {
            what: "spline requires at least 2 knots",
        });
    }
    for i in 0..t.len() - 1 {
        if t[i + 1] == t[i] {
            return Err(Error::DuplicateKnot { index: i + 1 });
        }
        if t[i + 1] < t[i] {
            return Err(Error::NonMonotonicKnots { index: i + 1 });
        }
    }
    Ok(())
}

/// Second derivatives at the knots for the natural spline; the interior
/// system is tridiagonal, so construction is linear in the knot count.
fn natural_second_derivatives(t: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n == 2 {
        return Ok(m);
    }
    let h: Vec<f64> = (0..n - 1).map(|i| t[i + 1] - t[i]).collect();
    let size = n - 2;
    let mut diag = vec![0.0; size];
    let mut off = vec![0.0; size.saturating_sub(1)];
    let mut rhs = vec![0.0; size];
    for j in 0..size {
        let i = j + 1;
        diag[j] = 2.0 * (h[i - 1] + h[i]);
        if j + 1 < size {
            off[j] = h[i];
        }
        rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    let interior = crate::tridiag::solve_tridiagonal(&off, &diag, &off, &rhs)?;
    m[1..=size].copy_from_slice(&interior);
    Ok(m)
}

fn coefficients(t: &[f64], y: &[f64], m: &[f64]) -> Vec<[f64; 4]> {
    let n = t.len();
    (0..n - 1)
        .map(|k| {
            let h = t[k + 1] - t[k];
            [
                y[k],
                (y[k + 1] - y[k]) / h - h * (2.0 * m[k] + m[k + 1]) / 6.0,
                m[k] / 2.0,
                (m[k + 1] - m[k]) / (6.0 * h),
            ]
        })
        .collect()
}

/// Fit a natural cubic spline through `(t, y)`.
pub fn fit_natural_cubic(t: &[f64], y: &[f64]) -> Result<CubicSpline> {
    validate_knots(t)?;
    if y.len() != t.len() {
        return Err(Error::LengthMismatch {
            expected: t.len(),
            got: y.len(),
        });
    }
    let m = natural_second_derivatives(t, y)?;
    Ok(CubicSpline {
        knots: t.to_vec(),
        coeffs: coefficients(t, y, &m),
    })
}

/// Exact derivative of the fitted piecewise cubic at each query point.
pub fn eval_derivative(spline: &CubicSpline, ts: &[f64]) -> Vec<f64> {
    ts.iter().map(|&t| spline.derivative(t)).collect()
}

impl CubicSpline {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Interval index for a query; out-of-range queries clamp to the
    /// boundary segment's cubic.
    fn interval(&self, t: f64) -> usize {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return 0;
        }
        if t >= self.knots[n - 1] {
            return n - 2;
        }
        // binary search for the interval containing t
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.interval(t);
        let tau = t - self.knots[k];
        let [a, b, c, d] = self.coeffs[k];
        a + tau * (b + tau * (c + tau * d))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let k = self.interval(t);
        let tau = t - self.knots[k];
        let [_, b, c, d] = self.coeffs[k];
        b + tau * (2.0 * c + 3.0 * d * tau)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let k = self.interval(t);
        let tau = t - self.knots[k];
        let [_, _, c, d] = self.coeffs[k];
        2.0 * c + 6.0 * d * tau
    }
}

/// Differentiable natural cubic spline over fixed knots: the interpolated
/// values are graph nodes, so gradients flow from any evaluation back to the
/// sampled column values.
pub struct DiffSpline {
    knots: Vec<f64>,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
}

impl DiffSpline {
    /// Fit columns of `y` (`N x C`) over `knots` (length `N`).
    pub fn fit(g: &Graph, knots: &[f64], y: &Var) -> Result<DiffSpline> {
        validate_knots(knots)?;
        let n = knots.len();
        let (yr, cc) = y.shape();
        if yr != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: yr,
            });
        }
        let h: Vec<f64> = (0..n - 1).map(|i| knots[i + 1] - knots[i]).collect();

        let m_full = if n == 2 {
            g.constant(Matrix::zeros(2, cc))
        } else {
            let size = n - 2;
            // rhs = 6 * D y with the interior difference stencil
            let mut dmat = Matrix::zeros(size, n);
            for j in 0..size {
                let i = j + 1;
                dmat[(j, i - 1)] = 6.0 / h[i - 1];
                dmat[(j, i)] = -6.0 / h[i] - 6.0 / h[i - 1];
                dmat[(j, i + 1)] = 6.0 / h[i];
            }
            let rhs = g.constant(dmat).matmul(y);
            let mut diag = vec![0.0; size];
            let mut off = vec![0.0; size.saturating_sub(1)];
            for j in 0..size {
                diag[j] = 2.0 * (h[j] + h[j + 1]);
                if j + 1 < size {
                    off[j] = h[j + 1];
                }
            }
            let interior = if size == 1 {
                // 1x1 system solved directly
                &rhs * &g.scalar(1.0 / diag[0])
            } else {
                let lower = g.constant(Matrix::col(&off));
                let diag = g.constant(Matrix::col(&diag));
                g.solve_tridiag(&lower, &diag, &lower, &rhs)?
            };
            let zero = g.constant(Matrix::zeros(1, cc));
            g.concat_rows(&[zero.clone(), interior, zero])
        };

        let first: Vec<usize> = (0..n - 1).collect();
        let second: Vec<usize> = (1..n).collect();
        let y0 = y.select_rows(&first);
        let y1 = y.select_rows(&second);
        let m0 = m_full.select_rows(&first);
        let m1 = m_full.select_rows(&second);

        let fill = |vals: &dyn Fn(usize) -> f64| {
            let mut m = Matrix::zeros(n - 1, cc);
            for i in 0..n - 1 {
                for j in 0..cc {
                    m[(i, j)] = vals(i);
                }
            }
            g.constant(m)
        };
        let inv_h = fill(&|i| 1.0 / h[i]);
        let h_over_6 = fill(&|i| h[i] / 6.0);
        let inv_6h = fill(&|i| 1.0 / (6.0 * h[i]));

        let dy = &y1 - &y0;
        let b = &(&dy * &inv_h) - &(&(&m0.scale(2.0) + &m1) * &h_over_6);
        let c = m0.scale(0.5);
        let d = &(&m1 - &m0) * &inv_6h;
        Ok(DiffSpline {
            knots: knots.to_vec(),
            a: y0,
            b,
            c,
            d,
        })
    }

    fn interval(&self, t: f64) -> usize {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return 0;
        }
        if t >= self.knots[n - 1] {
            return n - 2;
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Interpolated row (`1 x C`) at time `t`.
    pub fn eval(&self, t: f64) -> Var {
        let k = self.interval(t);
        let tau = t - self.knots[k];
        let a = self.a.select_rows(&[k]);
        let b = self.b.select_rows(&[k]);
        let c = self.c.select_rows(&[k]);
        let d = self.d.select_rows(&[k]);
        &a + &(&b + &(&c + &d.scale(tau)).scale(tau)).scale(tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_give_a_line() {
        let s = fit_natural_cubic(&[0.0, 2.0], &[1.0, 5.0]).unwrap();
        assert!((s.eval(1.0) - 3.0).abs() < 1e-14);
        assert!((s.derivative(0.5) - 2.0).abs() < 1e-14);
        assert_eq!(s.second_derivative(1.0), 0.0);
    }

    #[test]
    fn linear_data_reproduced_exactly() {
        let t: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = t.iter().map(|&x| 3.0 * x - 1.0).collect();
        let s = fit_natural_cubic(&t, &y).unwrap();
        for i in 0..40 {
            let q = i as f64 * 0.1;
            assert!((s.eval(q) - (3.0 * q - 1.0)).abs() < 1e-12);
            assert!((s.derivative(q) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolates_knot_values_exactly() {
        let t: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        let y: Vec<f64> = t.iter().map(|&x| (1.3 * x).sin() + 0.2 * x).collect();
        let s = fit_natural_cubic(&t, &y).unwrap();
        for (ti, yi) in t.iter().zip(y.iter()) {
            assert!((s.eval(*ti) - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn natural_boundary_second_derivative_is_zero() {
        let n = 20;
        let t: Vec<f64> = (0..n)
            .map(|i| i as f64 * 2.0 * core::f64::consts::PI / (n - 1) as f64)
            .collect();
        let y: Vec<f64> = t.iter().map(|&x| x.sin()).collect();
        let s = fit_natural_cubic(&t, &y).unwrap();
        assert!(s.second_derivative(t[0]).abs() < 1e-10);
        assert!(s.second_derivative(t[n - 1]).abs() < 1e-10);
    }

    #[test]
    fn derivative_of_sine_matches_cosine() {
        let n = 20;
        let t: Vec<f64> = (0..n)
            .map(|i| i as f64 * 2.0 * core::f64::consts::PI / (n - 1) as f64)
            .collect();
        let y: Vec<f64> = t.iter().map(|&x| x.sin()).collect();
        let s = fit_natural_cubic(&t, &y).unwrap();
        // interior only; the natural end condition distorts the boundary
        let mut worst = 0.0f64;
        for i in 0..200 {
            let q = 0.7 + i as f64 * (5.0 - 0.7) / 199.0;
            worst = worst.max((s.derivative(q) - q.cos()).abs());
        }
        assert!(worst < 0.05, "max abs error {worst}");
    }

    #[test]
    fn derivative_is_continuous_at_knots() {
        let t: Vec<f64> = (0..15).map(|i| i as f64 * 0.41).collect();
        let y: Vec<f64> = t.iter().map(|&x| (x * 0.9).cos() * x).collect();
        let s = fit_natural_cubic(&t, &y).unwrap();
        for k in 1..14 {
            let eps = 1e-9;
            let left = s.derivative(t[k] - eps);
            let right = s.derivative(t[k] + eps);
            assert!((left - right).abs() < 1e-6, "knot {k}: {left} vs {right}");
            // second derivative continuity (C2)
            let l2 = s.second_derivative(t[k] - eps);
            let r2 = s.second_derivative(t[k] + eps);
            assert!((l2 - r2).abs() < 1e-5, "knot {k}: {l2} vs {r2}");
        }
    }

    #[test]
    fn knot_validation_errors() {
        assert!(matches!(
            fit_natural_cubic(&[0.0, 1.0, 0.5], &[0.0; 3]),
            Err(Error::NonMonotonicKnots { index: 2 })
        ));
        assert!(matches!(
            fit_natural_cubic(&[0.0, 1.0, 1.0], &[0.0; 3]),
            Err(Error::DuplicateKnot { index: 2 })
        ));
    }

    #[test]
    fn fit_cost_scales_linearly() {
        // timing ratio between 10^4 and 10^3 knots stays far below quadratic
        let build = |n: usize| {
            let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let y: Vec<f64> = t.iter().map(|&x| (x * 0.01).sin()).collect();
            (t, y)
        };
        let (t1, y1) = build(1_000);
        let (t2, y2) = build(10_000);
        // warm up
        fit_natural_cubic(&t1, &y1).unwrap();
        let reps = 20;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            fit_natural_cubic(&t1, &y1).unwrap();
        }
        let small = start.elapsed().as_secs_f64();
        let start = std::time::Instant::now();
        for _ in 0..reps {
            fit_natural_cubic(&t2, &y2).unwrap();
        }
        let large = start.elapsed().as_secs_f64();
        let ratio = large / small.max(1e-9);
        assert!(ratio < 15.0, "scaling ratio {ratio}");
    }

    #[test]
    fn diff_spline_matches_plain_spline_and_is_differentiable() {
        let t: Vec<f64> = vec![0.0, 0.5, 1.1, 1.7, 2.6];
        let y: Vec<f64> = t.iter().map(|&x| (x * 1.4).sin()).collect();
        let plain = fit_natural_cubic(&t, &y).unwrap();

        let g = Graph::new();
        let yv = g.param(Matrix::col(&y));
        let ds = DiffSpline::fit(&g, &t, &yv).unwrap();
        for q in [0.0, 0.3, 0.77, 1.3, 2.0, 2.6] {
            let v = ds.eval(q).scalar_value();
            assert!((v - plain.eval(q)).abs() < 1e-12, "q = {q}");
        }

        // gradients of an evaluation with respect to the knot values
        let err = crate::gradcheck::check_gradients(
            |p| {
                let g = Graph::new();
                let yv = g.param(Matrix::col(p));
                let ds = DiffSpline::fit(&g, &t, &yv)?;
                let loss = ds.eval(1.23).square().sum();
                let grads = g.backward(&loss);
                Ok((loss.scalar_value(), grads.of(&yv).into_data()))
            },
            &y,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gradient error {err}");
    }
}
