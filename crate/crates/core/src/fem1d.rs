//! Piecewise-linear finite elements on a 1D mesh with implicit-Euler time
//! stepping for the reaction-diffusion latent force model.
//!
//! The semi-discrete system for `dy/dt = S u - lambda y + D y_xx` with
//! homogeneous Dirichlet boundaries is advanced by solving
//! `((1 + dt lambda) M + dt D K) y^{n+1} = M (y^n + dt S u^{n+1})`
//! per step, with boundary rows (and, equivalently for a zero boundary
//! value, columns) replaced by the identity so the boundary nodes are
//! exactly zero. Gradients flow through the registered adjoint of each
//! tridiagonal solve.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamRef, ParamStore};
use crate::tridiag::TriDiag;

/// Strictly increasing vertices on `[0, l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh1D {
    vertices: Vec<f64>,
}

impl Mesh1D {
    /// `n_elements` equal elements on `[0, length]`.
    pub fn uniform(n_elements: usize, length: f64) -> Self {
        assert!(n_elements >= 2, "at least 2 elements");
        let h = length / n_elements as f64;
        let mut vertices: Vec<f64> = (0..=n_elements).map(|k| k as f64 * h).collect();
        // pin the right boundary against accumulation error
        *vertices.last_mut().unwrap() = length;
        Mesh1D { vertices }
    }

    pub fn from_vertices(vertices: Vec<f64>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument {
                what: "mesh needs at least 2 elements",
            });
        }
        for i in 0..vertices.len() - 1 {
            if vertices[i + 1] <= vertices[i] {
                return Err(Error::InvalidArgument {
                    what: "mesh vertices must be strictly increasing",
                });
            }
        }
        Ok(Mesh1D { vertices })
    }

    /// Mesh whose vertex set is exactly the sorted unique locations present
    /// in the dataset (the data must include both boundaries).
    pub fn containing(points: &[f64]) -> Result<Self> {
        let mut v = points.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        Mesh1D::from_vertices(v)
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn element_width(&self, k: usize) -> f64 {
        self.vertices[k + 1] - self.vertices[k]
    }

    pub fn length(&self) -> f64 {
        *self.vertices.last().unwrap()
    }
}

/// Assembled mass and stiffness matrices, both tridiagonal over vertices.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub mass: TriDiag,
    pub stiffness: TriDiag,
}

/// Assemble P1 mass and stiffness matrices. For a uniform spacing `h` the
/// interior mass row is `(h/6)[1, 4, 1]` and the interior stiffness row is
/// `(1/h)[-1, 2, -1]`.
pub fn assemble(mesh: &Mesh1D) -> Result<FemSystem> {
    let k = mesh.n_vertices();
    let mut m_diag = vec![0.0; k];
    let mut m_off = vec![0.0; k - 1];
    let mut s_diag = vec![0.0; k];
    let mut s_off = vec![0.0; k - 1];
    for e in 0..mesh.n_elements() {
        let h = mesh.element_width(e);
        if h < 1e-12 {
            return Err(Error::DegenerateElement { index: e, width: h });
        }
        let a = h / 6.0; // element mass (h/6)[[2,1],[1,2]]
        m_diag[e] += 2.0 * a;
        m_diag[e + 1] += 2.0 * a;
        m_off[e] = a;
        let b = 1.0 / h; // element stiffness (1/h)[[1,-1],[-1,1]]
        s_diag[e] += b;
        s_diag[e + 1] += b;
        s_off[e] = -b;
    }
    Ok(FemSystem {
        mass: TriDiag::new(m_off.clone(), m_diag, m_off),
        stiffness: TriDiag::new(s_off.clone(), s_diag, s_off),
    })
}

/// Positive equation parameters of the reaction-diffusion model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeParams {
    pub sensitivity: f64,
    pub decay: f64,
    pub diffusion: f64,
}

fn dirichlet_bands(sys: &FemSystem, dt: f64, p: &PdeParams) -> TriDiag {
    let k = sys.mass.n();
    let cm = 1.0 + dt * p.decay;
    let cs = dt * p.diffusion;
    let mut diag: Vec<f64> = (0..k)
        .map(|i| cm * sys.mass.diag[i] + cs * sys.stiffness.diag[i])
        .collect();
    let mut off: Vec<f64> = (0..k - 1)
        .map(|i| cm * sys.mass.upper[i] + cs * sys.stiffness.upper[i])
        .collect();
    diag[0] = 1.0;
    diag[k - 1] = 1.0;
    off[0] = 0.0;
    off[k - 2] = 0.0;
    TriDiag::new(off.clone(), diag, off)
}

/// One implicit-Euler step; `u_next` is the force at the new time level.
pub fn step_implicit_euler(
    yn: &[f64],
    u_next: &[f64],
    dt: f64,
    p: &PdeParams,
    sys: &FemSystem,
) -> Result<Vec<f64>> {
    let k = sys.mass.n();
    assert_eq!(yn.len(), k);
    assert_eq!(u_next.len(), k);
    if dt <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "dt must be positive",
        });
    }
    let v: Vec<f64> = yn
        .iter()
        .zip(u_next.iter())
        .map(|(y, u)| y + dt * p.sensitivity * u)
        .collect();
    let mut rhs = sys.mass.matvec(&v);
    rhs[0] = 0.0;
    rhs[k - 1] = 0.0;
    dirichlet_bands(sys, dt, p).solve(&rhs)
}

/// Advance `steps = force.rows()` implicit-Euler steps; row `n` of `force`
/// holds the nodal force at time level `n+1`. Returns `(steps+1) x K`
/// including the initial state.
pub fn solve_pde(
    y0: &[f64],
    force: &Matrix,
    dt: f64,
    p: &PdeParams,
    sys: &FemSystem,
) -> Result<Matrix> {
    let k = sys.mass.n();
    assert_eq!(y0.len(), k);
    assert_eq!(force.cols(), k);
    let steps = force.rows();
    let mut out = Matrix::zeros(steps + 1, k);
    let mut cur = y0.to_vec();
    for j in 0..k {
        out[(0, j)] = cur[j];
    }
    for n in 0..steps {
        cur = step_implicit_euler(&cur, force.row_slice(n), dt, p, sys)?;
        for j in 0..k {
            out[(n + 1, j)] = cur[j];
        }
    }
    Ok(out)
}

/// Unconstrained storage of the PDE parameters.
#[derive(Clone, Debug)]
pub struct PdeRaw {
    pub raw_sensitivity: ParamRef,
    pub raw_decay: ParamRef,
    pub raw_diffusion: ParamRef,
}

impl PdeRaw {
    pub fn register(store: &mut ParamStore, prefix: &str, init: &PdeParams) -> Self {
        use crate::graph::softplus_inv;
        PdeRaw {
            raw_sensitivity: store.add(
                &alloc::format!("{prefix}.sensitivity"),
                Matrix::scalar(softplus_inv(init.sensitivity)),
            ),
            raw_decay: store.add(
                &alloc::format!("{prefix}.decay"),
                Matrix::scalar(softplus_inv(init.decay)),
            ),
            raw_diffusion: store.add(
                &alloc::format!("{prefix}.diffusion"),
                Matrix::scalar(softplus_inv(init.diffusion)),
            ),
        }
    }

    pub fn vars(&self, bound: &Bound) -> PdeVars {
        PdeVars {
            sensitivity: bound.var(self.raw_sensitivity).softplus(),
            decay: bound.var(self.raw_decay).softplus(),
            diffusion: bound.var(self.raw_diffusion).softplus(),
        }
    }

    pub fn params(&self, store: &ParamStore) -> PdeParams {
        use crate::graph::softplus_scalar;
        PdeParams {
            sensitivity: softplus_scalar(store.value(self.raw_sensitivity)[(0, 0)]),
            decay: softplus_scalar(store.value(self.raw_decay)[(0, 0)]),
            diffusion: softplus_scalar(store.value(self.raw_diffusion)[(0, 0)]),
        }
    }
}

/// Constrained parameter nodes.
pub struct PdeVars {
    pub sensitivity: Var,
    pub decay: Var,
    pub diffusion: Var,
}

/// Per-graph constants for the differentiable stepper.
pub struct FemConsts {
    m_lower: Var,
    m_diag: Var,
    m_upper: Var,
    k_lower: Var,
    k_diag: Var,
    k_upper: Var,
    diag_interior: Var,
    diag_boundary: Var,
    off_interior: Var,
    row_mask: Var,
    n_vertices: usize,
}

impl FemConsts {
    pub fn new(g: &Graph, sys: &FemSystem, n_cols: usize) -> Self {
        let k = sys.mass.n();
        let mut diag_interior = Matrix::filled(k, 1, 1.0);
        diag_interior[(0, 0)] = 0.0;
        diag_interior[(k - 1, 0)] = 0.0;
        let mut diag_boundary = Matrix::zeros(k, 1);
        diag_boundary[(0, 0)] = 1.0;
        diag_boundary[(k - 1, 0)] = 1.0;
        let mut off_interior = Matrix::filled(k - 1, 1, 1.0);
        off_interior[(0, 0)] = 0.0;
        off_interior[(k - 2, 0)] = 0.0;
        let mut row_mask = Matrix::filled(k, n_cols, 1.0);
        for j in 0..n_cols {
            row_mask[(0, j)] = 0.0;
            row_mask[(k - 1, j)] = 0.0;
        }
        FemConsts {
            m_lower: g.constant(Matrix::col(&sys.mass.lower)),
            m_diag: g.constant(Matrix::col(&sys.mass.diag)),
            m_upper: g.constant(Matrix::col(&sys.mass.upper)),
            k_lower: g.constant(Matrix::col(&sys.stiffness.lower)),
            k_diag: g.constant(Matrix::col(&sys.stiffness.diag)),
            k_upper: g.constant(Matrix::col(&sys.stiffness.upper)),
            diag_interior: g.constant(diag_interior),
            diag_boundary: g.constant(diag_boundary),
            off_interior: g.constant(off_interior),
            row_mask: g.constant(row_mask),
            n_vertices: k,
        }
    }
}

/// Differentiable implicit-Euler step on column-stacked samples
/// (`yn`, `u_next` are `K x S`).
pub fn step_implicit_euler_var(
    g: &Graph,
    yn: &Var,
    u_next: &Var,
    dt: f64,
    pv: &PdeVars,
    fem: &FemConsts,
) -> Result<Var> {
    let cm = pv.decay.scale(dt).offset(1.0);
    let cs = pv.diffusion.scale(dt);
    let diag_a = &(&(&(&fem.m_diag * &cm) + &(&fem.k_diag * &cs)) * &fem.diag_interior)
        + &fem.diag_boundary;
    let lower_a = &(&(&fem.m_lower * &cm) + &(&fem.k_lower * &cs)) * &fem.off_interior;
    let upper_a = &(&(&fem.m_upper * &cm) + &(&fem.k_upper * &cs)) * &fem.off_interior;
    let v = yn + &(u_next * &pv.sensitivity.scale(dt));
    let rhs_full = g.tri_matvec(&fem.m_lower, &fem.m_diag, &fem.m_upper, &v);
    let rhs = &rhs_full * &fem.row_mask;
    g.solve_tridiag(&lower_a, &diag_a, &upper_a, &rhs)
}

/// Differentiable multi-step solve. `force` is `(T*K) x S`, row-blocks per
/// time level `1..=T`; the result stacks states `0..=T` as `((T+1)*K) x S`.
pub fn solve_pde_var(
    g: &Graph,
    y0: &Matrix,
    force: &Var,
    steps: usize,
    dt: f64,
    pv: &PdeVars,
    fem: &FemConsts,
) -> Result<Var> {
    let k = fem.n_vertices;
    let (fr, s) = force.shape();
    if fr != steps * k {
        return Err(Error::DimensionMismatch {
            expected: (steps * k, s),
            got: (fr, s),
        });
    }
    let ones = g.constant(Matrix::filled(1, s, 1.0));
    let mut cur = if y0.cols() == s {
        g.constant(y0.clone())
    } else {
        g.constant(y0.clone()).matmul(&ones)
    };
    let mut rows = vec![cur.clone()];
    for n in 0..steps {
        let idx: Vec<usize> = (n * k..(n + 1) * k).collect();
        let u = force.select_rows(&idx);
        cur = step_implicit_euler_var(g, &cur, &u, dt, pv, fem)?;
        rows.push(cur.clone());
    }
    Ok(g.concat_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softplus_inv;

    #[test]
    fn uniform_dyadic_mesh_rows_are_exact() {
        // 64 elements on the unit interval: h = 1/64 is exact in binary, so
        // the interior rows equal (h/6)[1,4,1] and (1/h)[-1,2,-1] exactly
        let mesh = Mesh1D::uniform(64, 1.0);
        let sys = assemble(&mesh).unwrap();
        let h = 1.0 / 64.0;
        for i in 1..64 {
            assert_eq!(sys.mass.diag[i], 4.0 * (h / 6.0));
            assert_eq!(sys.mass.lower[i - 1], h / 6.0);
            assert_eq!(sys.mass.upper[i], h / 6.0);
            assert_eq!(sys.stiffness.diag[i], 2.0 * (1.0 / h));
            assert_eq!(sys.stiffness.lower[i - 1], -(1.0 / h));
            assert_eq!(sys.stiffness.upper[i], -(1.0 / h));
            let row_sum =
                sys.stiffness.lower[i - 1] + sys.stiffness.diag[i] + sys.stiffness.upper[i];
            assert_eq!(row_sum, 0.0);
        }
    }

    #[test]
    fn twenty_element_unit_mesh_matches_analytic_rows() {
        let mesh = Mesh1D::uniform(20, 1.0);
        let sys = assemble(&mesh).unwrap();
        for i in 1..20 {
            assert!((sys.mass.diag[i] - 4.0 / 120.0).abs() < 1e-12);
            assert!((sys.mass.upper[i] - 1.0 / 120.0).abs() < 1e-12);
            assert!((sys.stiffness.diag[i] - 40.0).abs() < 1e-9);
            assert!((sys.stiffness.upper[i] + 20.0).abs() < 1e-9);
            let row_sum =
                sys.stiffness.lower[i - 1] + sys.stiffness.diag[i] + sys.stiffness.upper[i];
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_mass_block() {
        let mesh = Mesh1D::from_vertices(alloc::vec![0.0, 0.35, 0.7]).unwrap();
        let sys = assemble(&mesh).unwrap();
        let h = 0.35;
        // first vertex touches one element only: diagonal 2h/6, coupling h/6
        assert!((sys.mass.diag[0] - 2.0 * h / 6.0).abs() < 1e-15);
        assert!((sys.mass.upper[0] - h / 6.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_element_is_rejected() {
        let mesh = Mesh1D {
            vertices: alloc::vec![0.0, 1e-13, 1.0],
        };
        assert!(matches!(
            assemble(&mesh),
            Err(Error::DegenerateElement { index: 0, .. })
        ));
    }

    #[test]
    fn no_dynamics_step_is_identity() {
        let mesh = Mesh1D::uniform(16, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 1.0,
            decay: 0.0,
            diffusion: 0.0,
        };
        let k = mesh.n_vertices();
        let yn: Vec<f64> = (0..k)
            .map(|i| {
                let x = mesh.vertices()[i];
                (core::f64::consts::PI * x).sin()
            })
            .collect();
        let u = vec![0.0; k];
        let y1 = step_implicit_euler(&yn, &u, 1e-2, &p, &sys).unwrap();
        for i in 0..k {
            assert!((y1[i] - yn[i]).abs() < 1e-13, "node {i}");
        }
    }

    #[test]
    fn zero_force_zero_state_stays_identically_zero() {
        let mesh = Mesh1D::uniform(8, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 0.7,
            decay: 0.3,
            diffusion: 0.5,
        };
        let force = Matrix::zeros(5, mesh.n_vertices());
        let traj = solve_pde(&vec![0.0; mesh.n_vertices()], &force, 0.01, &p, &sys).unwrap();
        assert!(traj.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heat_mode_decay_matches_analytic_rate() {
        let mesh = Mesh1D::uniform(64, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 1.0,
            decay: 0.0,
            diffusion: 1.0,
        };
        let dt = 1e-3;
        let k = mesh.n_vertices();
        let mut cur: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|&x| (core::f64::consts::PI * x).sin())
            .collect();
        let u = vec![0.0; k];
        for n in 1..=100 {
            cur = step_implicit_euler(&cur, &u, dt, &p, &sys).unwrap();
            assert_eq!(cur[0], 0.0);
            assert_eq!(cur[k - 1], 0.0);
            if n % 25 == 0 {
                let t = n as f64 * dt;
                let peak = cur.iter().cloned().fold(0.0f64, f64::max);
                let expected = (-core::f64::consts::PI.powi(2) * t).exp();
                let rel = (peak - expected).abs() / expected;
                assert!(rel < 0.02, "t = {t}: peak {peak} vs {expected}");
            }
        }
    }

    #[test]
    fn converges_to_the_steady_state_system() {
        let mesh = Mesh1D::uniform(24, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 1.3,
            decay: 0.8,
            diffusion: 0.5,
        };
        let k = mesh.n_vertices();
        let u: Vec<f64> = vec![1.0; k];
        let mut cur = vec![0.0; k];
        let force_row = Matrix::from_vec(1, k, u.clone());
        for _ in 0..600 {
            cur = step_implicit_euler(&cur, force_row.row_slice(0), 0.1, &p, &sys).unwrap();
        }
        // steady state: (lambda M + D K) y = S M u with Dirichlet rows
        let mut diag: Vec<f64> = (0..k)
            .map(|i| p.decay * sys.mass.diag[i] + p.diffusion * sys.stiffness.diag[i])
            .collect();
        let mut off: Vec<f64> = (0..k - 1)
            .map(|i| p.decay * sys.mass.upper[i] + p.diffusion * sys.stiffness.upper[i])
            .collect();
        diag[0] = 1.0;
        diag[k - 1] = 1.0;
        off[0] = 0.0;
        off[k - 2] = 0.0;
        let a = TriDiag::new(off.clone(), diag, off);
        let mut rhs = sys.mass.matvec(&u.iter().map(|x| x * p.sensitivity).collect::<Vec<_>>());
        rhs[0] = 0.0;
        rhs[k - 1] = 0.0;
        let lhs = a.matvec(&cur);
        let res: f64 = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(l, r)| (l - r) * (l - r))
            .sum::<f64>()
            .sqrt();
        assert!(res < 1e-8, "steady-state residual {res}");
    }

    #[test]
    fn backward_euler_dissipates_discrete_energy() {
        let mesh = Mesh1D::uniform(32, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 1.0,
            decay: 0.0,
            diffusion: 0.7,
        };
        let k = mesh.n_vertices();
        let mut cur: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|&x| (3.0 * core::f64::consts::PI * x).sin() + 0.3 * (7.0 * x).cos())
            .collect();
        cur[0] = 0.0;
        cur[k - 1] = 0.0;
        let u = vec![0.0; k];
        let energy = |y: &[f64]| -> f64 {
            let my = sys.mass.matvec(y);
            y.iter().zip(my.iter()).map(|(a, b)| a * b).sum()
        };
        let mut prev = energy(&cur);
        for _ in 0..50 {
            cur = step_implicit_euler(&cur, &u, 0.002, &p, &sys).unwrap();
            let e = energy(&cur);
            assert!(e <= prev + 1e-14, "energy increased: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn dirichlet_system_matrix_is_spd() {
        let mesh = Mesh1D::uniform(12, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 0.9,
            decay: 0.4,
            diffusion: 1.2,
        };
        let bands = dirichlet_bands(&sys, 0.05, &p);
        let dense = bands.to_dense();
        assert!(dense.symmetry_defect() < 1e-15);
        assert!(dense.cholesky(0.0).is_ok());
    }

    #[test]
    fn first_order_time_convergence() {
        let mesh = Mesh1D::uniform(32, 1.0);
        let sys = assemble(&mesh).unwrap();
        let p = PdeParams {
            sensitivity: 1.0,
            decay: 0.2,
            diffusion: 0.8,
        };
        let k = mesh.n_vertices();
        let y0: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|&x| (core::f64::consts::PI * x).sin())
            .collect();
        let run = |dt: f64, t_end: f64| -> Vec<f64> {
            let steps = (t_end / dt).round() as usize;
            let mut cur = y0.clone();
            let u: Vec<f64> = mesh.vertices().iter().map(|&x| x * (1.0 - x)).collect();
            for _ in 0..steps {
                cur = step_implicit_euler(&cur, &u, dt, &p, &sys).unwrap();
            }
            cur
        };
        let t_end = 0.08;
        let coarse = run(4e-3, t_end);
        let mid = run(2e-3, t_end);
        let reference = run(5e-4, t_end);
        let err = |y: &[f64]| -> f64 {
            y.iter()
                .zip(reference.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = err(&coarse) / err(&mid);
        assert!(
            ratio > 1.5 && ratio < 2.6,
            "first-order ratio {ratio} (coarse {})",
            err(&coarse)
        );
    }

    #[test]
    fn pde_gradients_pass_central_differences() {
        // gradients of sum(y_final^2) with respect to (S, lambda, D) and the
        // force values, through 5 implicit-Euler steps on 8 elements
        let mesh = Mesh1D::uniform(8, 1.0);
        let sys = assemble(&mesh).unwrap();
        let k = mesh.n_vertices();
        let steps = 5;
        let y0 = Matrix::from_vec(
            k,
            1,
            mesh.vertices()
                .iter()
                .map(|&x| (core::f64::consts::PI * x).sin())
                .collect(),
        );
        let mut base = alloc::vec![
            softplus_inv(0.9),
            softplus_inv(0.4),
            softplus_inv(1.1)
        ];
        for n in 0..steps * k {
            base.push(0.3 * ((n as f64) * 0.7).sin() + 0.5);
        }
        let err = crate::gradcheck::check_gradients(
            |pvec| {
                let g = Graph::new();
                let raw = g.param(Matrix::col(&pvec[0..3]));
                let force = g.param(Matrix::from_vec(steps * k, 1, pvec[3..].to_vec()));
                let pv = PdeVars {
                    sensitivity: raw.select_rows(&[0]).softplus(),
                    decay: raw.select_rows(&[1]).softplus(),
                    diffusion: raw.select_rows(&[2]).softplus(),
                };
                let fem = FemConsts::new(&g, &sys, 1);
                let traj = solve_pde_var(&g, &y0, &force, steps, 0.02, &pv, &fem)?;
                let last: Vec<usize> = (steps * k..(steps + 1) * k).collect();
                let loss = traj.select_rows(&last).square().sum();
                let grads = g.backward(&loss);
                let mut flat = grads.of(&raw).into_data();
                flat.extend(grads.of(&force).into_data());
                Ok((loss.scalar_value(), flat))
            },
            &base,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "gradient error {err}");
    }

    #[test]
    fn var_stepper_matches_plain_stepper() {
        let mesh = Mesh1D::uniform(10, 1.0);
        let sys = assemble(&mesh).unwrap();
        let k = mesh.n_vertices();
        let p = PdeParams {
            sensitivity: 0.8,
            decay: 0.3,
            diffusion: 0.6,
        };
        let y0: Vec<f64> = mesh.vertices().iter().map(|&x| x * (1.0 - x)).collect();
        let force = Matrix::from_vec(
            3 * k,
            1,
            (0..3 * k).map(|i| ((i as f64) * 0.31).cos()).collect(),
        );
        let plain_force = Matrix::from_vec(3, k, force.data().to_vec());
        let plain = solve_pde(&y0, &plain_force, 0.05, &p, &sys).unwrap();

        let g = Graph::new();
        let mut store = ParamStore::new();
        let raw = PdeRaw::register(&mut store, "pde", &p);
        let bound = store.bind(&g);
        let pv = raw.vars(&bound);
        let fem = FemConsts::new(&g, &sys, 1);
        let fvar = g.constant(force);
        let traj = solve_pde_var(&g, &Matrix::col(&y0), &fvar, 3, 0.05, &pv, &fem)
            .unwrap()
            .value();
        for n in 0..4 {
            for j in 0..k {
                let a = plain[(n, j)];
                let b = traj[(n * k + j, 0)];
                assert!((a - b).abs() < 1e-12, "step {n} node {j}: {a} vs {b}");
            }
        }
    }
}
