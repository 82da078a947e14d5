//! Covariance functions for the latent-force GP priors: RBF (isotropic or
//! with one lengthscale per input dimension) and the periodic kernel.
//!
//! Positivity of every hyperparameter is enforced by storing unconstrained
//! values and mapping them through softplus when binding onto a graph.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{softplus_inv, Graph, Var};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamRef, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// sigma^2 exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2); one lengthscale per
    /// input dimension covers the anisotropic case.
    Rbf,
    /// sigma^2 exp(-2 sin^2(pi |t - t'| / p) / l^2), 1D inputs only.
    Periodic,
}

/// Positive-valued hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub period: Option<f64>,
    pub variance: f64,
}

impl KernelParams {
    pub fn rbf(lengthscales: Vec<f64>, variance: f64) -> Self {
        KernelParams {
            lengthscales,
            period: None,
            variance,
        }
    }

    pub fn periodic(lengthscale: f64, period: f64, variance: f64) -> Self {
        KernelParams {
            lengthscales: alloc::vec![lengthscale],
            period: Some(period),
            variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lengthscales.iter().all(|&l| l > 0.0)
            && self.variance > 0.0
            && self.period.map_or(true, |p| p > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "kernel hyperparameters must be strictly positive",
            })
        }
    }

    /// Default initialization: per-dimension lengthscale equal to the
    /// smallest positive pairwise distance between inputs, unit variance,
    /// and (for the periodic kernel) period equal to half the input span.
    pub fn init_from_inputs(kind: KernelKind, x: &Matrix) -> Self {
        let d = x.cols();
        let mut lengthscales = Vec::with_capacity(d);
        for dim in 0..d {
            let mut smallest = f64::INFINITY;
            for i in 0..x.rows() {
                for j in (i + 1)..x.rows() {
                    let dist = (x[(i, dim)] - x[(j, dim)]).abs();
                    if dist > 0.0 {
                        smallest = smallest.min(dist);
                    }
                }
            }
            if !smallest.is_finite() {
                smallest = 1.0;
            }
            lengthscales.push(smallest);
        }
        let period = match kind {
            KernelKind::Periodic => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..x.rows() {
                    lo = lo.min(x[(i, 0)]);
                    hi = hi.max(x[(i, 0)]);
                }
                Some(((hi - lo) / 2.0).max(1e-3))
            }
            KernelKind::Rbf => None,
        };
        KernelParams {
            lengthscales,
            period,
            variance: 1.0,
        }
    }
}

/// Pointwise RBF evaluation.
pub fn rbf(x: &[f64], xp: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != xp.len() || x.len() != params.lengthscales.len() {
        return Err(Error::DimensionMismatch {
            expected: (params.lengthscales.len(), 1),
            got: (x.len(), 1),
        });
    }
    let mut q = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - xp[d];
        let l = params.lengthscales[d];
        q += diff * diff / (l * l);
    }
    Ok(params.variance * (-0.5 * q).exp())
}

/// Pointwise periodic kernel evaluation.
pub fn periodic(t: f64, tp: f64, params: &KernelParams) -> f64 {
    let p = params.period.expect("periodic kernel requires a period");
    let l = params.lengthscales[0];
    let s = (core::f64::consts::PI * (t - tp).abs() / p).sin();
    params.variance * (-2.0 * s * s / (l * l)).exp()
}

fn eval(kind: KernelKind, x: &[f64], xp: &[f64], params: &KernelParams) -> Result<f64> {
    match kind {
        KernelKind::Rbf => rbf(x, xp, params),
        KernelKind::Periodic => Ok(periodic(x[0], xp[0], params)),
    }
}

/// Gram matrix between the rows of `x` (N x D) and `xp` (M x D).
pub fn kernel_matrix(
    x: &Matrix,
    xp: &Matrix,
    kind: KernelKind,
    params: &KernelParams,
) -> Result<Matrix> {
    if x.cols() != xp.cols() {
        return Err(Error::DimensionMismatch {
            expected: (x.rows(), x.cols()),
            got: (xp.rows(), xp.cols()),
        });
    }
    params.validate()?;
    let mut k = Matrix::zeros(x.rows(), xp.rows());
    for i in 0..x.rows() {
        for j in 0..xp.rows() {
            k[(i, j)] = eval(kind, x.row_slice(i), xp.row_slice(j), params)?;
        }
    }
    Ok(k)
}

/// Unconstrained kernel hyperparameters held in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct KernelRaw {
    pub kind: KernelKind,
    pub dims: usize,
    pub raw_lengthscales: ParamRef,
    pub raw_period: Option<ParamRef>,
    pub raw_variance: ParamRef,
}

impl KernelRaw {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        kind: KernelKind,
        init: &KernelParams,
    ) -> Self {
        let raw_ls: Vec<f64> = init.lengthscales.iter().map(|&l| softplus_inv(l)).collect();
        let raw_lengthscales = store.add(&format!("{prefix}.lengthscale"), Matrix::col(&raw_ls));
        let raw_period = init
            .period
            .map(|p| store.add(&format!("{prefix}.period"), Matrix::scalar(softplus_inv(p))));
        let raw_variance = store.add(
            &format!("{prefix}.variance"),
            Matrix::scalar(softplus_inv(init.variance)),
        );
        KernelRaw {
            kind,
            dims: init.lengthscales.len(),
            raw_lengthscales,
            raw_period,
            raw_variance,
        }
    }

    /// Constrained hyperparameter nodes on the bound graph.
    pub fn vars(&self, bound: &Bound) -> KernelVars {
        KernelVars {
            kind: self.kind,
            lengthscales: bound.var(self.raw_lengthscales).softplus(),
            period: self.raw_period.map(|p| bound.var(p).softplus()),
            variance: bound.var(self.raw_variance).softplus(),
        }
    }

    /// Current constrained values.
    pub fn params(&self, store: &ParamStore) -> KernelParams {
        let ls = store
            .value(self.raw_lengthscales)
            .data()
            .iter()
            .map(|&r| crate::graph::softplus_scalar(r))
            .collect();
        KernelParams {
            lengthscales: ls,
            period: self
                .raw_period
                .map(|p| crate::graph::softplus_scalar(store.value(p)[(0, 0)])),
            variance: crate::graph::softplus_scalar(store.value(self.raw_variance)[(0, 0)]),
        }
    }
}

/// Constrained hyperparameter nodes, ready for matrix construction.
pub struct KernelVars {
    pub kind: KernelKind,
    pub lengthscales: Var,
    pub period: Option<Var>,
    pub variance: Var,
}

/// Differentiable Gram matrix between fixed input sets. The pairwise
/// distances are constants; gradients flow to the hyperparameters.
pub fn kernel_matrix_var(g: &Graph, x: &Matrix, xp: &Matrix, kv: &KernelVars) -> Result<Var> {
    if x.cols() != xp.cols() {
        return Err(Error::DimensionMismatch {
            expected: (x.rows(), x.cols()),
            got: (xp.rows(), xp.cols()),
        });
    }
    let (n, m, d) = (x.rows(), xp.rows(), x.cols());
    match kv.kind {
        KernelKind::Rbf => {
            debug_assert_eq!(kv.lengthscales.shape().0, d);
            let mut q: Option<Var> = None;
            for dim in 0..d {
                let mut sq = Matrix::zeros(n, m);
                for i in 0..n {
                    for j in 0..m {
                        let diff = x[(i, dim)] - xp[(j, dim)];
                        sq[(i, j)] = diff * diff;
                    }
                }
                let sq = g.constant(sq);
                let l = kv.lengthscales.select_rows(&[dim]);
                let inv2l2 = &g.scalar(0.5) / &l.square();
                let term = &sq * &inv2l2;
                q = Some(match q {
                    Some(acc) => &acc + &term,
                    None => term,
                });
            }
            let q = q.expect("at least one input dimension");
            Ok(&kv.variance * &q.neg().exp())
        }
        KernelKind::Periodic => {
            let mut dist = Matrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    dist[(i, j)] = core::f64::consts::PI * (x[(i, 0)] - xp[(j, 0)]).abs();
                }
            }
            let dist = g.constant(dist);
            let p = kv.period.as_ref().expect("periodic kernel requires period");
            let s = (&dist / p).sin();
            let l = kv.lengthscales.select_rows(&[0]);
            let q = &s.square().scale(2.0) / &l.square();
            Ok(&kv.variance * &q.neg().exp())
        }
    }
}
