//! Sparse variational GP machinery: inducing points, the variational
//! posterior over inducing values, its KL to the GP prior, reparameterized
//! force sampling and the Gaussian likelihood.
//!
//! Per latent force `i` the variational distribution is
//! `q(u_i) = N(m_i, C_i)` with `C_i = L_i L_i^T` stored through its Cholesky
//! factor; forces are a-priori independent, so the joint `q` factorizes and
//! the KL term is the sum of per-force KLs.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{softplus_inv, Graph, Var};
use crate::kernels::{kernel_matrix_var, KernelVars};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamRef, ParamStore};

/// Inducing locations, fixed on a uniform grid over the input range.
#[derive(Clone, Debug)]
pub struct InducingSet {
    z: Matrix,
}

impl InducingSet {
    /// Explicit locations. A single inducing value is admitted for scalar
    /// closed-form checks; experiment construction goes through the grid
    /// constructors, which require at least 2 points.
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() < 1 {
            return Err(Error::InvalidArgument {
                what: "at least one inducing point required",
            });
        }
        Ok(InducingSet { z })
    }

    /// `m` points evenly spaced over `[lo, hi]`.
    pub fn uniform_grid(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument {
                what: "at least 2 inducing points required",
            });
        }
        let step = (hi - lo) / (m - 1) as f64;
        let z = Matrix::from_vec(m, 1, (0..m).map(|i| lo + i as f64 * step).collect());
        Ok(InducingSet { z })
    }

    /// `m1 x m2` lattice over `[lo1, hi1] x [lo2, hi2]`.
    pub fn lattice(lo1: f64, hi1: f64, m1: usize, lo2: f64, hi2: f64, m2: usize) -> Result<Self> {
        if m1 < 2 || m2 < 2 {
            return Err(Error::InvalidArgument {
                what: "at least a 2x2 inducing lattice required",
            });
        }
        let s1 = (hi1 - lo1) / (m1 - 1) as f64;
        let s2 = (hi2 - lo2) / (m2 - 1) as f64;
        let mut z = Matrix::zeros(m1 * m2, 2);
        for i in 0..m1 {
            for j in 0..m2 {
                z[(i * m2 + j, 0)] = lo1 + i as f64 * s1;
                z[(i * m2 + j, 1)] = lo2 + j as f64 * s2;
            }
        }
        Ok(InducingSet { z })
    }

    pub fn locations(&self) -> &Matrix {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Unconstrained storage of the factorized variational distribution.
#[derive(Clone, Debug)]
pub struct VariationalRaw {
    pub means: Vec<ParamRef>,
    pub chol_raw: Vec<ParamRef>,
    pub m: usize,
}

impl VariationalRaw {
    /// Near-prior start: zero means, Cholesky factors `0.1 * I`.
    pub fn register(store: &mut ParamStore, prefix: &str, n_forces: usize, m: usize) -> Self {
        let mut means = Vec::new();
        let mut chol_raw = Vec::new();
        for i in 0..n_forces {
            means.push(store.add(&format!("{prefix}.mean{i}"), Matrix::zeros(m, 1)));
            let mut raw = Matrix::zeros(m, m);
            let d = softplus_inv(0.1);
            for k in 0..m {
                raw[(k, k)] = d;
            }
            chol_raw.push(store.add(&format!("{prefix}.chol{i}"), raw));
        }
        VariationalRaw {
            means,
            chol_raw,
            m,
        }
    }

    pub fn n_forces(&self) -> usize {
        self.means.len()
    }

    /// Overwrite the stored state with explicit means and Cholesky factors.
    pub fn set_from(&self, store: &mut ParamStore, means: &[Matrix], chols: &[Matrix]) {
        for (i, (mean, chol)) in means.iter().zip(chols.iter()).enumerate() {
            store.set_value(self.means[i], mean.clone());
            let m = self.m;
            let mut raw = Matrix::zeros(m, m);
            for r in 0..m {
                for c in 0..r {
                    raw[(r, c)] = chol[(r, c)];
                }
                raw[(r, r)] = softplus_inv(chol[(r, r)]);
            }
            store.set_value(self.chol_raw[i], raw);
        }
    }

    /// Constrained nodes: means plus lower-triangular factors with positive
    /// diagonal (softplus on the stored diagonal).
    pub fn vars(&self, g: &Graph, bound: &Bound) -> VdistVars {
        let m = self.m;
        let mut strict = Matrix::zeros(m, m);
        for r in 0..m {
            for c in 0..r {
                strict[(r, c)] = 1.0;
            }
        }
        let strict = g.constant(strict);
        let chols = self
            .chol_raw
            .iter()
            .map(|&p| {
                let raw = bound.var(p);
                let off = raw * &strict;
                let diag = raw.diag_part().softplus().diag_embed();
                &off + &diag
            })
            .collect();
        VdistVars {
            means: self.means.iter().map(|&p| bound.var(p).clone()).collect(),
            chols,
        }
    }
}

/// Bound variational state: per force the mean and realized Cholesky factor.
pub struct VdistVars {
    pub means: Vec<Var>,
    pub chols: Vec<Var>,
}

/// Shared kernel blocks for a query set.
pub struct PosteriorBlocks {
    /// Cholesky factor of `K_MM + jitter I`.
    pub l_k: Var,
    /// `K_MM^{-1} K_M*`.
    pub w: Var,
    /// `K_M*`.
    pub k_mstar: Var,
    /// `K_**`.
    pub k_star: Var,
}

pub fn posterior_blocks(
    g: &Graph,
    inducing: &InducingSet,
    xstar: &Matrix,
    kv: &KernelVars,
    jitter: f64,
) -> Result<PosteriorBlocks> {
    let z = inducing.locations();
    let k_mm = kernel_matrix_var(g, z, z, kv)?;
    let l_k = g.cholesky(&k_mm, jitter)?;
    let k_mstar = kernel_matrix_var(g, z, xstar, kv)?;
    let w = g.solve_upper(&l_k.t(), &g.solve_lower(&l_k, &k_mstar));
    let k_star = kernel_matrix_var(g, xstar, xstar, kv)?;
    Ok(PosteriorBlocks {
        l_k,
        w,
        k_mstar,
        k_star,
    })
}

/// Variational posterior mean and covariance per force at the query points:
/// `m* = K_*M K_MM^{-1} m` and
/// `S* = K_** + K_*M K_MM^{-1} (C - K_MM) K_MM^{-1} K_M*`.
pub fn predictive(
    g: &Graph,
    vdist: &VdistVars,
    inducing: &InducingSet,
    xstar: &Matrix,
    kv: &KernelVars,
    jitter: f64,
) -> Result<Vec<(Var, Var)>> {
    let blocks = posterior_blocks(g, inducing, xstar, kv, jitter)?;
    let mut out = Vec::with_capacity(vdist.means.len());
    for i in 0..vdist.means.len() {
        out.push(predictive_one(g, &blocks, &vdist.means[i], &vdist.chols[i]));
    }
    Ok(out)
}

fn predictive_one(g: &Graph, blocks: &PosteriorBlocks, mean: &Var, chol: &Var) -> (Var, Var) {
    let _ = g;
    let wt = blocks.w.t();
    let m_star = wt.matmul(mean);
    let gmat = chol.t().matmul(&blocks.w);
    let cov_part = gmat.t().matmul(&gmat);
    let prior_part = wt.matmul(&blocks.k_mstar);
    let s = &(&blocks.k_star + &cov_part) - &prior_part;
    let s_star = (&s + &s.t()).scale(0.5);
    (m_star, s_star)
}

/// `sum_i KL(q(u_i) || N(0, K_MM))`, each term
/// `1/2 (tr(K^{-1} C_i) + m_i^T K^{-1} m_i - M + logdet K - logdet C_i)`.
pub fn kl_to_prior(
    g: &Graph,
    vdist: &VdistVars,
    inducing: &InducingSet,
    kv: &KernelVars,
    jitter: f64,
) -> Result<Var> {
    let z = inducing.locations();
    let m = inducing.len() as f64;
    let k_mm = kernel_matrix_var(g, z, z, kv)?;
    let l_k = g.cholesky(&k_mm, jitter)?;
    let logdet_k = l_k.diag_part().ln().sum().scale(2.0);
    let mut total: Option<Var> = None;
    for i in 0..vdist.means.len() {
        let v = g.solve_lower(&l_k, &vdist.means[i]);
        let a = g.solve_lower(&l_k, &vdist.chols[i]);
        let logdet_c = vdist.chols[i].diag_part().ln().sum().scale(2.0);
        let kl = (&(&(&a.square().sum() + &v.square().sum()).offset(-m) + &logdet_k)
            - &logdet_c)
            .scale(0.5);
        total = Some(match total {
            Some(acc) => &acc + &kl,
            None => kl,
        });
    }
    Ok(total.expect("at least one latent force"))
}

/// Pathwise reparameterized draw per force:
/// `f_i = m*_i + chol(S*_i + jitter I) eps_i` with externally supplied
/// standard-normal columns, so the same seed reproduces the same forces and
/// gradients flow to the variational state and kernel hyperparameters.
///
/// `eps[i]` has one column per Monte Carlo sample; the result keeps that
/// column layout.
pub fn sample_forces_multi(
    g: &Graph,
    vdist: &VdistVars,
    inducing: &InducingSet,
    xstar: &Matrix,
    kv: &KernelVars,
    jitter: f64,
    eps: &[Matrix],
) -> Result<Vec<Var>> {
    if eps.len() != vdist.means.len() {
        return Err(Error::LengthMismatch {
            expected: vdist.means.len(),
            got: eps.len(),
        });
    }
    let blocks = posterior_blocks(g, inducing, xstar, kv, jitter)?;
    let mut out = Vec::with_capacity(eps.len());
    for i in 0..eps.len() {
        let (m_star, s_star) = predictive_one(g, &blocks, &vdist.means[i], &vdist.chols[i]);
        let l_s = g.cholesky(&s_star, jitter)?;
        let e = g.constant(eps[i].clone());
        let spread = l_s.matmul(&e);
        let ones = g.constant(Matrix::filled(1, eps[i].cols(), 1.0));
        let mean_tiled = m_star.matmul(&ones);
        out.push(&mean_tiled + &spread);
    }
    Ok(out)
}

/// Single-draw form: `eps` is `N* x L`, the result is the `N* x L` force
/// matrix with one column per latent force.
pub fn sample_forces(
    g: &Graph,
    vdist: &VdistVars,
    inducing: &InducingSet,
    xstar: &Matrix,
    kv: &KernelVars,
    jitter: f64,
    eps: &Matrix,
) -> Result<Var> {
    let per_force: Vec<Matrix> = (0..vdist.means.len())
        .map(|i| {
            let mut col = Matrix::zeros(eps.rows(), 1);
            for r in 0..eps.rows() {
                col[(r, 0)] = eps[(r, i)];
            }
            col
        })
        .collect();
    let cols = sample_forces_multi(g, vdist, inducing, xstar, kv, jitter, &per_force)?;
    Ok(g.concat_cols(&cols))
}

/// Sum over entries of the Gaussian log density
/// `-1/2 log(2 pi sigma^2) - (y - yhat)^2 / (2 sigma^2)`, with one noise
/// variance per output column.
pub fn gaussian_loglik(g: &Graph, y: &Matrix, yhat: &Var, sigma2: &Var) -> Var {
    let (n, p) = y.shape();
    debug_assert_eq!(yhat.shape(), (n, p));
    debug_assert_eq!(sigma2.shape(), (p, 1));
    let ones = g.constant(Matrix::filled(n, 1, 1.0));
    let sig = ones.matmul(&sigma2.t());
    let target = g.constant(y.clone());
    let resid = &target - yhat;
    let quad = &resid.square() / &sig.scale(2.0);
    let log_norm = sig.ln().offset((2.0 * core::f64::consts::PI).ln()).scale(0.5);
    (&log_norm + &quad).neg().sum()
}

/// Monte Carlo average of per-sample log likelihood for column-stacked
/// samples: `target` is `R x 1`, `yhat` is `R x S`, `sigma2_rows` is `R x 1`
/// (already expanded to the row layout of the stacked trajectory).
pub fn mc_gaussian_loglik(g: &Graph, target: &Matrix, yhat: &Var, sigma2_rows: &Var) -> Var {
    let (r, s) = yhat.shape();
    debug_assert_eq!(target.shape(), (r, 1));
    debug_assert_eq!(sigma2_rows.shape(), (r, 1));
    let ones = g.constant(Matrix::filled(1, s, 1.0));
    let sig = sigma2_rows.matmul(&ones);
    let tgt = g.constant(target.clone()).matmul(&ones);
    let resid = &tgt - yhat;
    let quad = &resid.square() / &sig.scale(2.0);
    let log_norm = sig.ln().offset((2.0 * core::f64::consts::PI).ln()).scale(0.5);
    (&log_norm + &quad).neg().sum().scale(1.0 / s as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_matrix, KernelKind, KernelParams, KernelRaw};
    use crate::rng::Rng;
    use alloc::vec;

    fn setup_store(
        m: usize,
        n_forces: usize,
        kp: &KernelParams,
    ) -> (ParamStore, KernelRaw, VariationalRaw) {
        let mut store = ParamStore::new();
        let kraw = KernelRaw::register(&mut store, "kernel", KernelKind::Rbf, kp);
        let vraw = VariationalRaw::register(&mut store, "q", n_forces, m);
        (store, kraw, vraw)
    }

    /// Dense Gauss-Jordan inverse; oracle only.
    fn dense_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if aug[(r, col)].abs() > aug[(piv, col)].abs() {
                    piv = r;
                }
            }
            for j in 0..2 * n {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for j in 0..2 * n {
                        let v = aug[(col, j)] * f;
                        aug[(r, j)] -= v;
                    }
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn prior_recovery_at_inducing_inputs() {
        let kp = KernelParams::rbf(vec![0.8], 1.3);
        let (mut store, kraw, vraw) = setup_store(4, 1, &kp);
        let inducing = InducingSet::uniform_grid(0.0, 3.0, 4).unwrap();
        let k_mm = kernel_matrix(inducing.locations(), inducing.locations(), KernelKind::Rbf, &kp)
            .unwrap();
        let l = k_mm.cholesky(0.0).unwrap();
        vraw.set_from(&mut store, &[Matrix::zeros(4, 1)], &[l]);

        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let res = predictive(&g, &vd, &inducing, inducing.locations(), &kv, 0.0).unwrap();
        let (m_star, s_star) = &res[0];
        assert!(m_star.value().max_abs() < 1e-10);
        let defect = s_star.value().sub(&k_mm).max_abs();
        assert!(defect < 1e-8, "S* vs K_MM defect {defect}");
    }

    #[test]
    fn predictive_mean_is_identity_at_inducing_inputs() {
        let kp = KernelParams::rbf(vec![0.6], 1.0);
        let (mut store, kraw, vraw) = setup_store(4, 1, &kp);
        let inducing = InducingSet::uniform_grid(0.0, 3.0, 4).unwrap();
        let k_mm = kernel_matrix(inducing.locations(), inducing.locations(), KernelKind::Rbf, &kp)
            .unwrap();
        let l = k_mm.cholesky(0.0).unwrap();
        let mean = Matrix::col(&[0.3, -1.2, 0.8, 2.0]);
        vraw.set_from(&mut store, &[mean.clone()], &[l]);

        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let res = predictive(&g, &vd, &inducing, inducing.locations(), &kv, 0.0).unwrap();
        let got = res[0].0.value();
        assert!(got.sub(&mean).max_abs() < 1e-9);
    }

    #[test]
    fn predictive_matches_dense_inverse_oracle() {
        let kp = KernelParams::rbf(vec![0.9], 1.4);
        let (mut store, kraw, vraw) = setup_store(3, 1, &kp);
        let inducing = InducingSet::new(Matrix::col(&[0.1, 1.0, 2.3])).unwrap();
        let xstar = Matrix::col(&[0.5, 1.9]);
        let mean = Matrix::col(&[0.4, -0.2, 1.1]);
        let cfac = Matrix::from_rows(&[&[0.9, 0.0, 0.0], &[0.2, 0.7, 0.0], &[-0.1, 0.3, 1.2]]);
        vraw.set_from(&mut store, &[mean.clone()], &[cfac.clone()]);

        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let res = predictive(&g, &vd, &inducing, &xstar, &kv, 0.0).unwrap();

        // literal transcription of the two formulas using a dense inverse
        let z = inducing.locations();
        let k_mm = kernel_matrix(z, z, KernelKind::Rbf, &kp).unwrap();
        let k_sm = kernel_matrix(&xstar, z, KernelKind::Rbf, &kp).unwrap();
        let k_ss = kernel_matrix(&xstar, &xstar, KernelKind::Rbf, &kp).unwrap();
        let kinv = dense_inverse(&k_mm);
        let c = cfac.matmul(&cfac.transpose());
        let m_oracle = k_sm.matmul(&kinv).matmul(&mean);
        let s_oracle = k_ss.add(
            &k_sm
                .matmul(&kinv)
                .matmul(&c.sub(&k_mm))
                .matmul(&kinv)
                .matmul(&k_sm.transpose()),
        );
        assert!(res[0].0.value().sub(&m_oracle).max_abs() < 1e-8);
        assert!(res[0].1.value().sub(&s_oracle).max_abs() < 1e-8);
    }

    #[test]
    fn kl_is_zero_when_q_equals_prior() {
        let kp = KernelParams::rbf(vec![0.7], 1.2);
        let (mut store, kraw, vraw) = setup_store(5, 2, &kp);
        let inducing = InducingSet::uniform_grid(0.0, 2.0, 5).unwrap();
        let k_mm = kernel_matrix(inducing.locations(), inducing.locations(), KernelKind::Rbf, &kp)
            .unwrap();
        let l = k_mm.cholesky(0.0).unwrap();
        vraw.set_from(
            &mut store,
            &[Matrix::zeros(5, 1), Matrix::zeros(5, 1)],
            &[l.clone(), l],
        );
        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let kl = kl_to_prior(&g, &vd, &inducing, &kv, 0.0).unwrap();
        assert!(kl.scalar_value().abs() < 1e-10, "KL {}", kl.scalar_value());
    }

    #[test]
    fn scalar_kl_closed_forms() {
        // M=1, K=1: prior N(0,1)
        let kp = KernelParams::rbf(vec![1.0], 1.0);
        let inducing = InducingSet::new(Matrix::from_vec(1, 1, vec![0.0])).unwrap();
        let cases: [(f64, f64, f64); 2] = [
            (1.0, 1.0, 0.5),                         // m=1, C=1 -> 1/2
            (0.0, 0.5, 0.5 * (0.5 - 1.0 - 0.5f64.ln())), // ~ 0.096574
        ];
        for (mean, c, expected) in cases {
            let mut store = ParamStore::new();
            let kraw = KernelRaw::register(&mut store, "kernel", KernelKind::Rbf, &kp);
            let vraw = VariationalRaw::register(&mut store, "q", 1, 1);
            vraw.set_from(
                &mut store,
                &[Matrix::scalar(mean)],
                &[Matrix::scalar(c.sqrt())],
            );
            let g = Graph::new();
            let bound = store.bind(&g);
            let kv = kraw.vars(&bound);
            let vd = vraw.vars(&g, &bound);
            let kl = kl_to_prior(&g, &vd, &inducing, &kv, 0.0).unwrap();
            assert!(
                (kl.scalar_value() - expected).abs() < 1e-10,
                "KL {} vs {expected}",
                kl.scalar_value()
            );
        }
    }

    #[test]
    fn kl_nonnegative_on_random_states() {
        let kp = KernelParams::rbf(vec![0.5], 1.0);
        let inducing = InducingSet::uniform_grid(0.0, 3.0, 6).unwrap();
        let mut rng = Rng::new(17);
        for _ in 0..100 {
            let mut store = ParamStore::new();
            let kraw = KernelRaw::register(&mut store, "kernel", KernelKind::Rbf, &kp);
            let vraw = VariationalRaw::register(&mut store, "q", 1, 6);
            let mean = rng.normal_matrix(6, 1);
            let mut chol = Matrix::zeros(6, 6);
            for i in 0..6 {
                for j in 0..i {
                    chol[(i, j)] = 0.3 * rng.normal();
                }
                chol[(i, i)] = 0.2 + rng.uniform();
            }
            vraw.set_from(&mut store, &[mean], &[chol]);
            let g = Graph::new();
            let bound = store.bind(&g);
            let kv = kraw.vars(&bound);
            let vd = vraw.vars(&g, &bound);
            let kl = kl_to_prior(&g, &vd, &inducing, &kv, 1e-8).unwrap();
            assert!(kl.scalar_value() >= -1e-10, "KL {}", kl.scalar_value());
        }
    }

    #[test]
    fn zero_noise_draw_returns_predictive_means_and_is_deterministic() {
        let kp = KernelParams::rbf(vec![0.8], 1.0);
        let (mut store, kraw, vraw) = setup_store(4, 2, &kp);
        let mut rng = Rng::new(3);
        let chol = {
            let mut c = Matrix::zeros(4, 4);
            for i in 0..4 {
                for j in 0..i {
                    c[(i, j)] = 0.1 * rng.normal();
                }
                c[(i, i)] = 0.5 + 0.1 * rng.uniform();
            }
            c
        };
        vraw.set_from(
            &mut store,
            &[rng.normal_matrix(4, 1), rng.normal_matrix(4, 1)],
            &[chol.clone(), chol],
        );
        let inducing = InducingSet::uniform_grid(0.0, 3.0, 4).unwrap();
        let xstar = Matrix::col(&[0.2, 1.1, 2.4]);

        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let zero = Matrix::zeros(3, 2);
        let f = sample_forces(&g, &vd, &inducing, &xstar, &kv, 1e-8, &zero).unwrap();
        let means = predictive(&g, &vd, &inducing, &xstar, &kv, 1e-8).unwrap();
        for i in 0..2 {
            for r in 0..3 {
                assert!((f.value()[(r, i)] - means[i].0.value()[(r, 0)]).abs() < 1e-12);
            }
        }

        // identical draws for identical noise
        let e = Rng::new(9).normal_matrix(3, 2);
        let f1 = sample_forces(&g, &vd, &inducing, &xstar, &kv, 1e-8, &e)
            .unwrap()
            .value();
        let f2 = sample_forces(&g, &vd, &inducing, &xstar, &kv, 1e-8, &e)
            .unwrap()
            .value();
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn empirical_covariance_matches_s_star() {
        let kp = KernelParams::rbf(vec![0.9], 1.1);
        let (mut store, kraw, vraw) = setup_store(4, 1, &kp);
        let mut rng = Rng::new(21);
        let mut chol = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..i {
                chol[(i, j)] = 0.2 * rng.normal();
            }
            chol[(i, i)] = 0.4 + 0.2 * rng.uniform();
        }
        vraw.set_from(&mut store, &[rng.normal_matrix(4, 1)], &[chol]);
        let inducing = InducingSet::uniform_grid(0.0, 3.0, 4).unwrap();
        let xstar = Matrix::col(&[0.5, 1.5, 2.5]);

        let g = Graph::new();
        let bound = store.bind(&g);
        let kv = kraw.vars(&bound);
        let vd = vraw.vars(&g, &bound);
        let (m_star, s_star) = predictive(&g, &vd, &inducing, &xstar, &kv, 1e-10)
            .unwrap()
            .remove(0);
        let m_star = m_star.value();
        let s_star = s_star.value();
        let l_s = s_star.cholesky(1e-10).unwrap();

        // draw 10^5 samples directly from the realized mean/factor
        let n_samples = 100_000;
        let e = rng.normal_matrix(3, n_samples);
        let spread = l_s.matmul(&e);
        let mut cov = Matrix::zeros(3, 3);
        let mut mean_emp = [0.0f64; 3];
        for s in 0..n_samples {
            for r in 0..3 {
                mean_emp[r] += m_star[(r, 0)] + spread[(r, s)];
            }
        }
        for m in &mut mean_emp {
            *m /= n_samples as f64;
        }
        for s in 0..n_samples {
            for r in 0..3 {
                for c in 0..3 {
                    let dr = m_star[(r, 0)] + spread[(r, s)] - mean_emp[r];
                    let dc = m_star[(c, 0)] + spread[(c, s)] - mean_emp[c];
                    cov[(r, c)] += dr * dc;
                }
            }
        }
        cov = cov.scale(1.0 / n_samples as f64);
        let rel = cov.sub(&s_star).frobenius_norm() / s_star.frobenius_norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn gaussian_loglik_closed_forms() {
        let g = Graph::new();
        let sigma2 = g.constant(Matrix::scalar(1.0));
        let y = Matrix::scalar(0.7);
        let yhat = g.constant(Matrix::scalar(0.7));
        let v = gaussian_loglik(&g, &y, &yhat, &sigma2).scalar_value();
        assert!((v + 0.918939).abs() < 1e-6, "{v}");

        let yhat2 = g.constant(Matrix::scalar(1.7));
        let v2 = gaussian_loglik(&g, &y, &yhat2, &sigma2).scalar_value();
        assert!((v2 + 0.918939 + 0.5).abs() < 1e-6, "{v2}");

        // doubling entries doubles the result for identical residuals
        let y4 = Matrix::from_vec(2, 2, vec![0.7; 4]);
        let yhat4 = g.constant(Matrix::from_vec(2, 2, vec![1.7; 4]));
        let sigma2p = g.constant(Matrix::col(&[1.0, 1.0]));
        let v4 = gaussian_loglik(&g, &y4, &yhat4, &sigma2p).scalar_value();
        assert!((v4 - 4.0 * v2).abs() < 1e-9);
    }

    #[test]
    fn exact_gp_regression_posterior_mean_recovered_with_full_inducing() {
        // M = N, Z = X, m = K(K + s2 I)^{-1} y reproduces the standard GP
        // posterior mean at arbitrary query points
        let mut rng = Rng::new(31);
        for trial in 0..10 {
            let n = 6;
            let mut xs: Vec<f64> = (0..n)
                .map(|i| i as f64 * 0.5 + rng.uniform_in(0.05, 0.4))
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let x = Matrix::from_vec(n, 1, xs.clone());
            let y = Matrix::from_vec(n, 1, xs.iter().map(|&t| (1.5 * t).sin()).collect());
            let kp = KernelParams::rbf(vec![0.9], 1.0);
            let s2 = 0.05;

            let k_xx = kernel_matrix(&x, &x, KernelKind::Rbf, &kp).unwrap();
            let mut k_noise = k_xx.clone();
            for i in 0..n {
                k_noise[(i, i)] += s2;
            }
            let alpha = k_noise.cholesky_solve(&y, 0.0).unwrap();
            let mean_q = k_xx.matmul(&alpha);
            // exact posterior covariance K - K (K + s2)^{-1} K
            let c = k_xx.sub(&k_xx.matmul(&k_noise.cholesky_solve(&k_xx, 0.0).unwrap()));

            let mut store = ParamStore::new();
            let kraw = KernelRaw::register(&mut store, "kernel", KernelKind::Rbf, &kp);
            let vraw = VariationalRaw::register(&mut store, "q", 1, n);
            vraw.set_from(&mut store, &[mean_q], &[c.cholesky(1e-12).unwrap()]);
            let inducing = InducingSet::new(x.clone()).unwrap();

            let xstar = Matrix::col(&[0.3, 1.23, 2.9]);
            let g = Graph::new();
            let bound = store.bind(&g);
            let kv = kraw.vars(&bound);
            let vd = vraw.vars(&g, &bound);
            let got = predictive(&g, &vd, &inducing, &xstar, &kv, 0.0).unwrap()[0]
                .0
                .value();

            let k_sx = kernel_matrix(&xstar, &x, KernelKind::Rbf, &kp).unwrap();
            let exact = k_sx.matmul(&alpha);
            let defect = got.sub(&exact).max_abs();
            assert!(defect < 1e-6, "trial {trial}: defect {defect}");
        }
    }

    #[test]
    fn gradients_flow_through_sampling_and_likelihood() {
        let kp = KernelParams::rbf(vec![0.8], 1.0);
        let (store, kraw, vraw) = setup_store(3, 1, &kp);
        let inducing = InducingSet::uniform_grid(0.0, 2.0, 3).unwrap();
        let xstar = Matrix::col(&[0.3, 1.0, 1.7]);
        let eps = Rng::new(4).normal_matrix(3, 1);
        let y = Matrix::col(&[0.2, -0.1, 0.4]);
        let p0 = store.flatten();
        let err = crate::gradcheck::check_gradients(
            |p| {
                let mut s = store.clone();
                s.load_flat(p)?;
                let g = Graph::new();
                let bound = s.bind(&g);
                let kv = kraw.vars(&bound);
                let vd = vraw.vars(&g, &bound);
                let f = sample_forces(&g, &vd, &inducing, &xstar, &kv, 1e-6, &eps)?;
                let sigma2 = g.constant(Matrix::scalar(0.1));
                let loss = gaussian_loglik(&g, &y, &f, &sigma2);
                let grads = g.backward(&loss);
                let flat: Vec<f64> = bound
                    .vars()
                    .iter()
                    .flat_map(|v| grads.of(v).into_data())
                    .collect();
                Ok((loss.scalar_value(), flat))
            },
            &p0,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "gradient error {err}");
    }
}
