//! Differentiable ODE integration. Fixed-step classical RK4 and an
//! adaptive embedded 4(5) pair with PI step control, both consuming latent
//! forces as continuous functions of time.
//!
//! Gradients are obtained by backpropagation through the recorded solver
//! steps: the right-hand side is built from graph operations, so each stage
//! contributes its adjoint and no continuous adjoint equation is needed.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::interp::DiffSpline;
use crate::matrix::Matrix;

/// Solution values on a grid. For ODEs the values are `N x P` over the time
/// grid; for PDEs they are `T x K` over the time grid x mesh vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTrajectory {
    pub times: Vec<f64>,
    pub space: Option<Vec<f64>>,
    pub values: Matrix,
}

impl FieldTrajectory {
    pub fn ode(times: Vec<f64>, values: Matrix) -> Self {
        assert_eq!(times.len(), values.rows());
        FieldTrajectory {
            times,
            space: None,
            values,
        }
    }

    pub fn pde(times: Vec<f64>, space: Vec<f64>, values: Matrix) -> Self {
        assert_eq!(times.len(), values.rows());
        assert_eq!(space.len(), values.cols());
        FieldTrajectory {
            times,
            space: Some(space),
            values,
        }
    }
}

/// Continuous `t -> R^{L x S}` force built from sampled values on a dense
/// grid plus natural cubic spline interpolation. Evaluations between grid
/// points lie on the interpolant and gradients flow back to the samples.
pub struct ForcePath {
    spline: DiffSpline,
    n_forces: usize,
    n_samples: usize,
}

impl ForcePath {
    /// `samples` is `N x (L*S)` with column index `l * S + s`.
    pub fn new(
        g: &Graph,
        times: &[f64],
        samples: &Var,
        n_forces: usize,
        n_samples: usize,
    ) -> Result<Self> {
        let (rows, cols) = samples.shape();
        if rows != times.len() || cols != n_forces * n_samples {
            return Err(Error::DimensionMismatch {
                expected: (times.len(), n_forces * n_samples),
                got: (rows, cols),
            });
        }
        Ok(ForcePath {
            spline: DiffSpline::fit(g, times, samples)?,
            n_forces,
            n_samples,
        })
    }

    /// Force matrix `L x S` at time `t`.
    pub fn at(&self, t: f64) -> Var {
        self.spline.eval(t).reshape(self.n_forces, self.n_samples)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
}

/// Right-hand side of the driven system: `(t, y, f) -> dy/dt`, with the
/// state `P x S` and force `L x S` carrying one column per sample.
pub type Rhs<'a> = &'a dyn Fn(f64, &Var, &Var) -> Var;

pub struct OdeProblem<'a> {
    /// Initial state, `P x S`.
    pub y0: Matrix,
    /// Strictly increasing output times; integration starts at `grid[0]`.
    pub grid: &'a [f64],
    pub rhs: Rhs<'a>,
}

impl OdeProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(Error::InvalidArgument {
                what: "output grid needs at least 2 points",
            });
        }
        for i in 0..self.grid.len() - 1 {
            if self.grid[i + 1] <= self.grid[i] {
                return Err(Error::InvalidArgument {
                    what: "output grid must be strictly increasing",
                });
            }
        }
        Ok(())
    }
}

fn check_finite(y: &Var, t: f64) -> Result<()> {
    if y.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { time: t })
    }
}

/// Classical fixed-step RK4. `h` is the nominal step; each grid interval is
/// covered by `round(interval / h)` equal substeps. The trajectory is the
/// row-stacked states `(N*P) x S` in grid order.
pub fn rk4_solve(g: &Graph, problem: &OdeProblem, path: &ForcePath, h: f64) -> Result<Var> {
    problem.validate()?;
    if h <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "step size must be positive",
        });
    }
    let mut cur = g.constant(problem.y0.clone());
    let mut f_cur = path.at(problem.grid[0]);
    let mut rows = vec![cur.clone()];
    for w in problem.grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let n_sub = ((t1 - t0) / h).round().max(1.0) as usize;
        let hs = (t1 - t0) / n_sub as f64;
        let mut t = t0;
        for _ in 0..n_sub {
            let f_mid = path.at(t + 0.5 * hs);
            let f_end = path.at(t + hs);
            let k1 = (problem.rhs)(t, &cur, &f_cur);
            let y2 = &cur + &k1.scale(0.5 * hs);
            let k2 = (problem.rhs)(t + 0.5 * hs, &y2, &f_mid);
            let y3 = &cur + &k2.scale(0.5 * hs);
            let k3 = (problem.rhs)(t + 0.5 * hs, &y3, &f_mid);
            let y4 = &cur + &k3.scale(hs);
            let k4 = (problem.rhs)(t + hs, &y4, &f_end);
            let incr = &(&k1 + &k2.scale(2.0)) + &(&k3.scale(2.0) + &k4);
            cur = &cur + &incr.scale(hs / 6.0);
            f_cur = f_end;
            t += hs;
            check_finite(&cur, t)?;
        }
        rows.push(cur.clone());
    }
    Ok(g.concat_rows(&rows))
}

/// Counters from an adaptive run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
}

// Fehlberg 4(5) tableau.
const A: [[f64; 5]; 5] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const B4: [f64; 6] = [
    25.0 / 216.0,
    0.0,
    1408.0 / 2565.0,
    2197.0 / 4104.0,
    -0.2,
    0.0,
];

const H_MIN: f64 = 1e-10;

/// Embedded-pair adaptive stepping with PI step-size control and cubic
/// Hermite dense output at the requested grid times. The higher-order
/// solution is propagated.
pub fn adaptive_solve(
    g: &Graph,
    problem: &OdeProblem,
    path: &ForcePath,
    rtol: f64,
    atol: f64,
) -> Result<(Var, SolveStats)> {
    problem.validate()?;
    if rtol <= 0.0 || atol <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "tolerances must be positive",
        });
    }
    let t_end = *problem.grid.last().unwrap();
    let mut t = problem.grid[0];
    let mut cur = g.constant(problem.y0.clone());
    let mut f_cur = (problem.rhs)(t, &cur, &path.at(t));
    let mut rows: Vec<Var> = vec![cur.clone()];
    let mut pending = 1; // next grid index awaiting output
    let mut h = ((t_end - t) / 100.0).max(H_MIN * 10.0);
    let mut err_prev: f64 = 1e-2;
    let mut stats = SolveStats::default();

    while t < t_end {
        h = h.min(t_end - t);
        if h < H_MIN {
            return Err(Error::StepSizeUnderflow { time: t, step: h });
        }
        // stages
        let mut k: Vec<Var> = Vec::with_capacity(6);
        k.push(f_cur.clone());
        for s in 1..6 {
            let mut y_s = cur.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = A[s - 1][j];
                if a != 0.0 {
                    y_s = &y_s + &kj.scale(a * h);
                }
            }
            let ts = t + C[s] * h;
            k.push((problem.rhs)(ts, &y_s, &path.at(ts)));
        }
        let mut y5 = cur.clone();
        let mut y4 = cur.clone();
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                y5 = &y5 + &kj.scale(B5[j] * h);
            }
            if B4[j] != 0.0 {
                y4 = &y4 + &kj.scale(B4[j] * h);
            }
        }
        // weighted RMS error norm over all entries
        let v5 = y5.value();
        let v4 = y4.value();
        let vc = cur.value();
        let mut acc = 0.0;
        for i in 0..v5.len() {
            let scale = atol + rtol * vc.data()[i].abs().max(v5.data()[i].abs());
            let e = (v5.data()[i] - v4.data()[i]) / scale;
            acc += e * e;
        }
        let err = (acc / v5.len() as f64).sqrt().max(1e-12);

        if err <= 1.0 {
            // accept; dense output for grid times inside (t, t+h]
            let t_new = t + h;
            check_finite(&y5, t_new)?;
            let f_new = (problem.rhs)(t_new, &y5, &path.at(t_new));
            while pending < problem.grid.len() && problem.grid[pending] <= t_new + 1e-12 {
                let tq = problem.grid[pending];
                if (tq - t_new).abs() <= 1e-12 {
                    rows.push(y5.clone());
                } else {
                    let th = (tq - t) / h;
                    let h00 = 2.0 * th * th * th - 3.0 * th * th + 1.0;
                    let h10 = th * th * th - 2.0 * th * th + th;
                    let h01 = -2.0 * th * th * th + 3.0 * th * th;
                    let h11 = th * th * th - th * th;
                    let interp = &(&cur.scale(h00) + &f_cur.scale(h10 * h))
                        + &(&y5.scale(h01) + &f_new.scale(h11 * h));
                    rows.push(interp);
                }
                pending += 1;
            }
            cur = y5;
            f_cur = f_new;
            t = t_new;
            stats.accepted += 1;
            let fac = 0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            h *= fac.clamp(0.2, 5.0);
            err_prev = err;
        } else {
            stats.rejected += 1;
            let fac = 0.9 * err.powf(-0.2);
            h *= fac.clamp(0.1, 1.0);
        }
        if stats.accepted + stats.rejected > 1_000_000 {
            return Err(Error::StepSizeUnderflow { time: t, step: h });
        }
    }
    debug_assert_eq!(pending, problem.grid.len());
    Ok((g.concat_rows(&rows), stats))
}

/// Plain (non-recorded) RK4 over a grid; used by the synthetic ground-truth
/// generators where no gradients are required.
pub fn rk4_solve_plain(
    y0: &[f64],
    grid: &[f64],
    substeps: usize,
    rhs: impl Fn(f64, &[f64]) -> Vec<f64>,
) -> Matrix {
    let p = y0.len();
    let mut out = Matrix::zeros(grid.len(), p);
    let mut cur = y0.to_vec();
    for j in 0..p {
        out[(0, j)] = cur[j];
    }
    for w in 0..grid.len() - 1 {
        let (t0, t1) = (grid[w], grid[w + 1]);
        let n = substeps.max(1);
        let h = (t1 - t0) / n as f64;
        let mut t = t0;
        for _ in 0..n {
            let k1 = rhs(t, &cur);
            let y2: Vec<f64> = cur.iter().zip(&k1).map(|(y, k)| y + 0.5 * h * k).collect();
            let k2 = rhs(t + 0.5 * h, &y2);
            let y3: Vec<f64> = cur.iter().zip(&k2).map(|(y, k)| y + 0.5 * h * k).collect();
            let k3 = rhs(t + 0.5 * h, &y3);
            let y4: Vec<f64> = cur.iter().zip(&k3).map(|(y, k)| y + h * k).collect();
            let k4 = rhs(t + h, &y4);
            for i in 0..p {
                cur[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t += h;
        }
        for j in 0..p {
            out[(w + 1, j)] = cur[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_path(g: &Graph, t0: f64, t1: f64, c: f64) -> ForcePath {
        let times: Vec<f64> = (0..5).map(|i| t0 + (t1 - t0) * i as f64 / 4.0).collect();
        let samples = g.constant(Matrix::filled(5, 1, c));
        ForcePath::new(g, &times, &samples, 1, 1).unwrap()
    }

    #[test]
    fn constant_force_integrates_exactly() {
        let g = Graph::new();
        let grid: Vec<f64> = (0..6).map(|i| i as f64 * 0.4).collect();
        let path = constant_path(&g, 0.0, 2.0, 1.7);
        let rhs = |_t: f64, _y: &Var, f: &Var| f.clone();
        let problem = OdeProblem {
            y0: Matrix::scalar(0.3),
            grid: &grid,
            rhs: &rhs,
        };
        let traj = rk4_solve(&g, &problem, &path, 0.1).unwrap().value();
        for (i, &t) in grid.iter().enumerate() {
            let expected = 0.3 + 1.7 * t;
            assert!((traj[(i, 0)] - expected).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        let g = Graph::new();
        let grid = [0.0, 1.0];
        let path = constant_path(&g, 0.0, 1.0, 0.0);
        let rhs = |_t: f64, y: &Var, _f: &Var| y.neg();
        let problem = OdeProblem {
            y0: Matrix::scalar(1.0),
            grid: &grid,
            rhs: &rhs,
        };
        let traj = rk4_solve(&g, &problem, &path, 0.1).unwrap().value();
        let err = (traj[(1, 0)] - (-1.0f64).exp()).abs();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn rk4_is_fourth_order_on_the_exponential() {
        let run = |h: f64| -> f64 {
            let g = Graph::new();
            let grid = [0.0, 1.0];
            let path = constant_path(&g, 0.0, 1.0, 0.0);
            let rhs = |_t: f64, y: &Var, _f: &Var| y.neg();
            let problem = OdeProblem {
                y0: Matrix::scalar(1.0),
                grid: &grid,
                rhs: &rhs,
            };
            let traj = rk4_solve(&g, &problem, &path, h).unwrap().value();
            (traj[(1, 0)] - (-1.0f64).exp()).abs()
        };
        let hs = [0.2, 0.1, 0.05, 0.025];
        let errs: Vec<f64> = hs.iter().map(|&h| run(h)).collect();
        // least-squares slope of ln(err) against ln(h)
        let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
        assert!((3.7..=4.3).contains(&slope), "observed order {slope}");
        // halving h cuts the error by roughly 16x
        let ratio = errs[1] / errs[2];
        assert!(ratio > 10.0 && ratio < 22.0, "ratio {ratio}");
    }

    #[test]
    fn adaptive_matches_analytic_within_tolerance() {
        let g = Graph::new();
        let grid = [0.0, 0.5, 1.0];
        let path = constant_path(&g, 0.0, 1.0, 0.0);
        let rhs = |_t: f64, y: &Var, _f: &Var| y.neg();
        let problem = OdeProblem {
            y0: Matrix::scalar(1.0),
            grid: &grid,
            rhs: &rhs,
        };
        let (traj, _) = adaptive_solve(&g, &problem, &path, 1e-8, 1e-10).unwrap();
        let v = traj.value();
        assert!((v[(1, 0)] - (-0.5f64).exp()).abs() < 1e-6);
        assert!((v[(2, 0)] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn loosening_rtol_reduces_step_count_monotonically() {
        let steps = |rtol: f64| -> usize {
            let g = Graph::new();
            let grid = [0.0, 4.0];
            let path = constant_path(&g, 0.0, 4.0, 0.0);
            let rhs = |t: f64, y: &Var, _f: &Var| y.neg().scale(1.0 + 0.5 * (3.0 * t).sin());
            let problem = OdeProblem {
                y0: Matrix::scalar(1.0),
                grid: &grid,
                rhs: &rhs,
            };
            adaptive_solve(&g, &problem, &path, rtol, 1e-12)
                .unwrap()
                .1
                .accepted
        };
        let (loose, mid, tight) = (steps(1e-3), steps(1e-5), steps(1e-8));
        assert!(
            loose < mid && mid < tight,
            "steps {loose} / {mid} / {tight}"
        );
    }

    #[test]
    fn adaptive_agrees_with_tiny_step_rk4_on_driven_predator() {
        // predator equation with softplus response to an oscillating force
        let g = Graph::new();
        let times: Vec<f64> = (0..33).map(|i| i as f64 * 6.0 / 32.0).collect();
        let samples = g.constant(Matrix::from_vec(
            33,
            1,
            times.iter().map(|&t| (1.3 * t).sin()).collect(),
        ));
        let path = ForcePath::new(&g, &times, &samples, 1, 1).unwrap();
        let grid: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let rhs = |_t: f64, y: &Var, f: &Var| {
            let growth = f.softplus().scale(1.1);
            &(&growth * y) - &y.scale(0.9)
        };
        let problem = OdeProblem {
            y0: Matrix::scalar(1.2),
            grid: &grid,
            rhs: &rhs,
        };
        let fine = rk4_solve(&g, &problem, &path, 1e-3).unwrap().value();
        let (adapt, _) = adaptive_solve(&g, &problem, &path, 1e-8, 1e-10).unwrap();
        let defect = adapt.value().sub(&fine).max_abs();
        assert!(defect < 1e-5, "defect {defect}");
    }

    #[test]
    fn terminal_gradients_pass_central_differences_for_both_solvers() {
        // d/dt y = softplus(f) * a - b y; parameters = [a, b, 4 force samples]
        let times: Vec<f64> = vec![0.0, 0.4, 0.8, 1.2];
        let grid = [0.0, 0.6, 1.2];
        let base = [1.1f64, 0.7, 0.3, 0.9, 0.5, -0.2];
        for adaptive in [false, true] {
            let eval = |p: &[f64]| -> crate::error::Result<(f64, Vec<f64>)> {
                let g = Graph::new();
                let theta = g.param(Matrix::col(&p[0..2]));
                let samples = g.param(Matrix::col(&p[2..6]));
                let path = ForcePath::new(&g, &times, &samples, 1, 1)?;
                let rhs = |_t: f64, y: &Var, f: &Var| {
                    let a = theta.select_rows(&[0]);
                    let b = theta.select_rows(&[1]);
                    &(&f.softplus() * &a) - &(y * &b)
                };
                let problem = OdeProblem {
                    y0: Matrix::scalar(0.8),
                    grid: &grid,
                    rhs: &rhs,
                };
                let traj = if adaptive {
                    adaptive_solve(&g, &problem, &path, 1e-7, 1e-9)?.0
                } else {
                    rk4_solve(&g, &problem, &path, 0.05)?
                };
                let loss = traj.select_rows(&[2]).square().sum();
                let grads = g.backward(&loss);
                let mut flat = grads.of(&theta).into_data();
                flat.extend(grads.of(&samples).into_data());
                Ok((loss.scalar_value(), flat))
            };
            let err = crate::gradcheck::check_gradients(eval, &base, 1e-4).unwrap();
            assert!(err <= 1e-3, "adaptive={adaptive} gradient error {err}");
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let run = || -> Vec<u64> {
            let g = Graph::new();
            let times: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
            let samples = g.constant(Matrix::from_vec(
                9,
                1,
                times.iter().map(|&t| (2.0 * t).cos()).collect(),
            ));
            let path = ForcePath::new(&g, &times, &samples, 1, 1).unwrap();
            let grid = [0.0, 1.0, 2.0];
            let rhs = |_t: f64, y: &Var, f: &Var| &f.softplus() - &y.scale(0.4);
            let problem = OdeProblem {
                y0: Matrix::scalar(0.1),
                grid: &grid,
                rhs: &rhs,
            };
            let (traj, _) = adaptive_solve(&g, &problem, &path, 1e-6, 1e-9).unwrap();
            traj.value().data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_state_is_reported() {
        let g = Graph::new();
        let grid = [0.0, 5.0, 10.0, 20.0, 40.0, 80.0];
        let path = constant_path(&g, 0.0, 80.0, 0.0);
        let rhs = |_t: f64, y: &Var, _f: &Var| y.square().scale(10.0);
        let problem = OdeProblem {
            y0: Matrix::scalar(2.0),
            grid: &grid,
            rhs: &rhs,
        };
        assert!(matches!(
            rk4_solve(&g, &problem, &path, 1.0),
            Err(Error::NonFiniteState { .. })
        ));
    }
}
