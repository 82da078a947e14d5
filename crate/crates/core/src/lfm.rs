//! Latent force models: response functions, the per-family equations, ELBO
//! assembly, gradient-matching pre-estimation and the two-phase training
//! loop (pre-estimation followed by forward-solution fine-tuning).

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::fem1d::{assemble, FemConsts, Mesh1D, PdeRaw};
use crate::graph::{softplus_inv, softplus_scalar, Graph, Var};
use crate::interp::{eval_derivative, fit_natural_cubic};
use crate::kernels::{KernelKind, KernelParams, KernelRaw};
use crate::matrix::Matrix;
use crate::odesolve::{adaptive_solve, rk4_solve, ForcePath, OdeProblem};
use crate::opt::Adam;
use crate::params::{Bound, ParamRef, ParamStore};
use crate::rng::Rng;
use crate::svgp::{
    kl_to_prior, mc_gaussian_loglik, sample_forces_multi, InducingSet, VariationalRaw,
};

/// Response applied to the latent forces before they enter the equation.
#[derive(Clone, Debug, PartialEq)]
pub enum ResponseFn {
    Identity,
    Softplus,
    /// Hill response per output `j`:
    /// `prod_i f_i^{w_ji} / (prod_i f_i^{w_ji} + exp(-w_j0))`.
    Hill {
        weights: Matrix,
        offsets: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseKind {
    Identity,
    Softplus,
    Hill,
}

/// Scalar response for output `j`. The identity response of several forces
/// is their unweighted sum.
pub fn response(f: &[f64], rf: &ResponseFn, j: usize) -> Result<f64> {
    match rf {
        ResponseFn::Identity => Ok(f.iter().sum()),
        ResponseFn::Softplus => Ok(softplus_scalar(f.iter().sum())),
        ResponseFn::Hill { weights, offsets } => {
            if f.iter().any(|&x| x <= 0.0) {
                return Err(Error::DomainError {
                    what: "hill response requires positive forces",
                });
            }
            let mut prod = 1.0;
            for (i, &fi) in f.iter().enumerate() {
                prod *= fi.powf(weights[(j, i)]);
            }
            Ok(prod / (prod + (-offsets[j]).exp()))
        }
    }
}

/// `dy_j/dt = b_j + s_j G_j(f) - d_j y_j` componentwise.
pub fn transcription_rhs(
    _t: f64,
    y: &[f64],
    f: &[f64],
    basal: &[f64],
    sensitivity: &[f64],
    decay: &[f64],
    rf: &ResponseFn,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(y.len());
    for j in 0..y.len() {
        let gj = response(f, rf, j)?;
        out.push(basal[j] + sensitivity[j] * gj - decay[j] * y[j]);
    }
    Ok(out)
}

/// Predator equation with the prey replaced by a responded latent force:
/// `dv/dt = delta G(f) v - gamma v`.
pub fn lotka_rhs(_t: f64, v: f64, f: &[f64], growth: f64, decay: f64, rf: &ResponseFn) -> Result<f64> {
    Ok(growth * response(f, rf, 0)? * v - decay * v)
}

/// Differentiable response over column-stacked samples: `f` is `L x S`,
/// the result is `P x S`.
fn response_var(
    g: &Graph,
    f: &Var,
    kind: ResponseKind,
    hill: Option<(&Var, &Var)>,
    n_outputs: usize,
) -> Var {
    let (l, s) = f.shape();
    match kind {
        ResponseKind::Identity | ResponseKind::Softplus => {
            let summed = if l == 1 {
                f.clone()
            } else {
                g.constant(Matrix::filled(1, l, 1.0)).matmul(f)
            };
            let activated = match kind {
                ResponseKind::Softplus => summed.softplus(),
                _ => summed,
            };
            if n_outputs == 1 {
                activated
            } else {
                g.constant(Matrix::filled(n_outputs, 1, 1.0)).matmul(&activated)
            }
        }
        ResponseKind::Hill => {
            let (w, w0) = hill.expect("hill response requires weights");
            let z = w.matmul(&f.ln()); // P x S
            let num = z.exp();
            let ones = g.constant(Matrix::filled(1, s, 1.0));
            let denom_c = w0.neg().exp().matmul(&ones);
            &num / &(&num + &denom_c)
        }
    }
}

/// Which physical system a model describes.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Transcription { genes: usize },
    LotkaVolterra,
    ReactionDiffusion { mesh: Mesh1D, n_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverChoice {
    Rk4 { substeps: usize },
    Adaptive { rtol: f64, atol: f64 },
}

impl Default for SolverChoice {
    fn default() -> Self {
        SolverChoice::Rk4 { substeps: 4 }
    }
}

/// Observations of one system instance.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    /// Observation times (ODE) or frame times (PDE), strictly increasing.
    pub times: Vec<f64>,
    /// `N x P` outputs (ODE) or `N x K` nodal frames (PDE).
    pub outputs: Matrix,
    /// Spatial nodes for PDE data.
    pub space: Option<Vec<f64>>,
}

impl ExperimentData {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.cols()
    }
}

enum PhiRefs {
    Transcription {
        basal: ParamRef,
        sens_first: ParamRef,
        sens_rest: Option<ParamRef>,
        decay: ParamRef,
    },
    Lotka {
        growth: ParamRef,
        decay: ParamRef,
    },
    ReactionDiffusion(PdeRaw),
}

/// Model construction options.
#[derive(Clone, Debug)]
pub struct ModelInit {
    pub n_inducing: usize,
    pub inducing_lattice: (usize, usize),
    pub sigma2_init: f64,
    pub jitter: f64,
    pub seed: u64,
    /// Dense force grid resolution as a multiple of the data resolution.
    pub force_grid_factor: usize,
    pub solver: SolverChoice,
    /// Transcription identifiability: freeze the first gene's sensitivity.
    pub freeze_first_sensitivity: bool,
    /// Value the frozen sensitivity is pinned to (defaults to its random
    /// initialization when `None`).
    pub fixed_sensitivity: Option<f64>,
    /// Extend the force grid beyond the data window up to this time.
    pub horizon: Option<f64>,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            n_inducing: 16,
            inducing_lattice: (12, 12),
            sigma2_init: 0.01,
            jitter: 1e-5,
            seed: 0,
            force_grid_factor: 4,
            solver: SolverChoice::default(),
            freeze_first_sensitivity: true,
            fixed_sensitivity: None,
            horizon: None,
        }
    }
}

/// A latent force model: equation parameters, response, kernel and
/// variational state for one physical system.
pub struct LfmModel {
    pub family: Family,
    pub response: ResponseKind,
    pub store: ParamStore,
    pub kernel: KernelRaw,
    pub vdist: VariationalRaw,
    pub inducing: InducingSet,
    raw_sigma2: ParamRef,
    phi: PhiRefs,
    hill: Option<(ParamRef, ParamRef)>,
    pub n_forces: usize,
    pub n_outputs: usize,
    pub jitter: f64,
    pub solver: SolverChoice,
    /// Dense time grid carrying the sampled force paths (ODE families).
    pub force_grid: Vec<f64>,
    /// PDE time step.
    pub dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PreEstimation,
    FineTune,
}

fn dense_grid(times: &[f64], factor: usize, horizon: Option<f64>) -> Vec<f64> {
    let t0 = times[0];
    let t1 = horizon.unwrap_or(*times.last().unwrap()).max(*times.last().unwrap());
    let n = (times.len() - 1) * factor.max(1);
    let extra = if t1 > *times.last().unwrap() {
        let spacing = (times[times.len() - 1] - t0) / n as f64;
        ((t1 - times[times.len() - 1]) / spacing).ceil() as usize
    } else {
        0
    };
    let total = n + extra;
    let step = (t1 - t0) / total as f64;
    (0..=total).map(|i| t0 + i as f64 * step).collect()
}

fn uniform_phi(rng: &mut Rng, rows: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        1,
        (0..rows).map(|_| softplus_inv(rng.uniform_in(0.05, 1.0))).collect(),
    )
}

impl LfmModel {
    /// mRNA transcription model with `genes` outputs driven by `n_forces`
    /// latent transcription factors.
    pub fn transcription(
        data: &ExperimentData,
        n_forces: usize,
        response: ResponseKind,
        kernel_kind: KernelKind,
        init: &ModelInit,
    ) -> Result<Self> {
        let genes = data.n_outputs();
        let mut rng = Rng::stream(init.seed, 0xF1);
        let mut store = ParamStore::new();
        let x = Matrix::from_vec(data.times.len(), 1, data.times.clone());
        let kp = KernelParams::init_from_inputs(kernel_kind, &x);
        let kernel = KernelRaw::register(&mut store, "kernel", kernel_kind, &kp);
        let vdist = VariationalRaw::register(&mut store, "q", n_forces, init.n_inducing);
        let raw_sigma2 = store.add(
            "likelihood.sigma2",
            Matrix::filled(genes, 1, softplus_inv(init.sigma2_init)),
        );
        let basal = store.add("phi.basal", uniform_phi(&mut rng, genes));
        let s_init = init
            .fixed_sensitivity
            .map(softplus_inv)
            .unwrap_or_else(|| softplus_inv(rng.uniform_in(0.05, 1.0)));
        let sens_first = if init.freeze_first_sensitivity {
            store.add_frozen("phi.sensitivity_first", Matrix::scalar(s_init))
        } else {
            store.add("phi.sensitivity_first", Matrix::scalar(s_init))
        };
        let sens_rest = if genes > 1 {
            Some(store.add("phi.sensitivity_rest", uniform_phi(&mut rng, genes - 1)))
        } else {
            None
        };
        let decay = store.add("phi.decay", uniform_phi(&mut rng, genes));
        let hill = if response == ResponseKind::Hill {
            let w = store.add("phi.hill_weights", Matrix::filled(genes, n_forces, 1.0));
            let w0 = store.add("phi.hill_offsets", Matrix::zeros(genes, 1));
            Some((w, w0))
        } else {
            None
        };
        let inducing =
            InducingSet::uniform_grid(data.times[0], *data.times.last().unwrap(), init.n_inducing)?;
        Ok(LfmModel {
            family: Family::Transcription { genes },
            response,
            store,
            kernel,
            vdist,
            inducing,
            raw_sigma2,
            phi: PhiRefs::Transcription {
                basal,
                sens_first,
                sens_rest,
                decay,
            },
            hill,
            n_forces,
            n_outputs: genes,
            jitter: init.jitter,
            solver: init.solver,
            force_grid: dense_grid(&data.times, init.force_grid_factor, init.horizon),
            dt: None,
        })
    }

    /// Predator-only Lotka-Volterra model; the prey enters as the latent
    /// force through the response.
    pub fn lotka(
        data: &ExperimentData,
        kernel_kind: KernelKind,
        init: &ModelInit,
    ) -> Result<Self> {
        let mut rng = Rng::stream(init.seed, 0xF2);
        let mut store = ParamStore::new();
        let x = Matrix::from_vec(data.times.len(), 1, data.times.clone());
        let kp = KernelParams::init_from_inputs(kernel_kind, &x);
        let kernel = KernelRaw::register(&mut store, "kernel", kernel_kind, &kp);
        let vdist = VariationalRaw::register(&mut store, "q", 1, init.n_inducing);
        let raw_sigma2 = store.add(
            "likelihood.sigma2",
            Matrix::scalar(softplus_inv(init.sigma2_init)),
        );
        let growth = store.add("phi.growth", uniform_phi(&mut rng, 1));
        let decay = store.add("phi.decay", uniform_phi(&mut rng, 1));
        // inducing span covers the forecast horizon so extrapolated forces
        // stay anchored to the variational state
        let z_hi = init.horizon.unwrap_or(*data.times.last().unwrap());
        let inducing = InducingSet::uniform_grid(data.times[0], z_hi, init.n_inducing)?;
        Ok(LfmModel {
            family: Family::LotkaVolterra,
            response: ResponseKind::Softplus,
            store,
            kernel,
            vdist,
            inducing,
            raw_sigma2,
            phi: PhiRefs::Lotka { growth, decay },
            hill: None,
            n_forces: 1,
            n_outputs: 1,
            jitter: init.jitter,
            solver: init.solver,
            force_grid: dense_grid(&data.times, init.force_grid_factor, init.horizon),
            dt: None,
        })
    }

    /// Reaction-diffusion model on a 1D mesh; data frames must lie on the
    /// implicit-Euler step times.
    pub fn reaction_diffusion(
        data: &ExperimentData,
        mesh: Mesh1D,
        n_steps: usize,
        init: &ModelInit,
    ) -> Result<Self> {
        let space = data.space.as_ref().ok_or(Error::InvalidArgument {
            what: "reaction-diffusion data requires spatial nodes",
        })?;
        if space.len() != mesh.n_vertices() || data.outputs.cols() != mesh.n_vertices() {
            return Err(Error::DimensionMismatch {
                expected: (data.outputs.rows(), mesh.n_vertices()),
                got: (data.outputs.rows(), data.outputs.cols()),
            });
        }
        let t0 = data.times[0];
        let t1 = *data.times.last().unwrap();
        let dt = (t1 - t0) / n_steps as f64;
        for &t in &data.times {
            let level = (t - t0) / dt;
            if (level - level.round()).abs() > 1e-9 {
                return Err(Error::InvalidArgument {
                    what: "data times must lie on step times",
                });
            }
        }
        let mut rng = Rng::stream(init.seed, 0xF3);
        let mut store = ParamStore::new();
        // anisotropic kernel over (t, x)
        let mut pts = Matrix::zeros(data.times.len() * space.len(), 2);
        for (i, &t) in data.times.iter().enumerate() {
            for (j, &xx) in space.iter().enumerate() {
                pts[(i * space.len() + j, 0)] = t;
                pts[(i * space.len() + j, 1)] = xx;
            }
        }
        let kp = KernelParams::init_from_inputs(KernelKind::Rbf, &pts);
        let kernel = KernelRaw::register(&mut store, "kernel", KernelKind::Rbf, &kp);
        let (m1, m2) = init.inducing_lattice;
        let vdist = VariationalRaw::register(&mut store, "q", 1, m1 * m2);
        let raw_sigma2 = store.add(
            "likelihood.sigma2",
            Matrix::scalar(softplus_inv(init.sigma2_init)),
        );
        let pde = PdeRaw::register(&mut store, "phi", &crate::fem1d::PdeParams {
            sensitivity: rng.uniform_in(0.05, 1.0),
            decay: rng.uniform_in(0.05, 1.0),
            diffusion: rng.uniform_in(0.05, 1.0),
        });
        let inducing = InducingSet::lattice(t0, t1, m1, space[0], *space.last().unwrap(), m2)?;
        Ok(LfmModel {
            family: Family::ReactionDiffusion { mesh, n_steps },
            response: ResponseKind::Identity,
            store,
            kernel,
            vdist,
            inducing,
            raw_sigma2,
            phi: PhiRefs::ReactionDiffusion(pde),
            hill: None,
            n_forces: 1,
            n_outputs: 1,
            jitter: init.jitter,
            solver: init.solver,
            force_grid: data.times.clone(),
            dt: Some(dt),
        })
    }

    /// Rows of the standard-normal draw needed per force for a phase.
    pub fn eps_rows(&self, data: &ExperimentData, phase: Phase) -> usize {
        match (&self.family, phase) {
            (Family::ReactionDiffusion { mesh, n_steps }, Phase::FineTune) => {
                n_steps * mesh.n_vertices()
            }
            (Family::ReactionDiffusion { mesh, .. }, Phase::PreEstimation) => {
                data.times.len() * mesh.n_vertices()
            }
            (_, Phase::FineTune) => self.force_grid.len(),
            (_, Phase::PreEstimation) => data.times.len(),
        }
    }

    /// Constrained noise variance node (`P x 1`), softplus with a 1e-4 floor.
    fn sigma2_var(&self, bound: &Bound) -> Var {
        bound.var(self.raw_sigma2).softplus().offset(1e-4)
    }

    /// Current constrained noise variances.
    pub fn sigma2(&self) -> Vec<f64> {
        self.store
            .value(self.raw_sigma2)
            .data()
            .iter()
            .map(|&r| softplus_scalar(r) + 1e-4)
            .collect()
    }

    /// Current constrained equation parameters, in the declaration order
    /// used by the synthetic generators: transcription `[b_j, s_j, d_j]_j`
    /// flattened gene-major; Lotka `[growth, decay]`; reaction-diffusion
    /// `[sensitivity, decay, diffusion]`.
    pub fn phi(&self) -> Vec<f64> {
        match &self.phi {
            PhiRefs::Transcription {
                basal,
                sens_first,
                sens_rest,
                decay,
            } => {
                let b = self.store.value(*basal);
                let d = self.store.value(*decay);
                let mut s = vec![softplus_scalar(self.store.value(*sens_first)[(0, 0)])];
                if let Some(rest) = sens_rest {
                    s.extend(
                        self.store
                            .value(*rest)
                            .data()
                            .iter()
                            .map(|&r| softplus_scalar(r)),
                    );
                }
                let genes = b.rows();
                let mut out = Vec::with_capacity(3 * genes);
                for j in 0..genes {
                    out.push(softplus_scalar(b[(j, 0)]));
                    out.push(s[j]);
                    out.push(softplus_scalar(d[(j, 0)]));
                }
                out
            }
            PhiRefs::Lotka { growth, decay } => vec![
                softplus_scalar(self.store.value(*growth)[(0, 0)]),
                softplus_scalar(self.store.value(*decay)[(0, 0)]),
            ],
            PhiRefs::ReactionDiffusion(p) => {
                let pp = p.params(&self.store);
                vec![pp.sensitivity, pp.decay, pp.diffusion]
            }
        }
    }

    /// Indices into [`LfmModel::phi`] that are frozen during training
    /// (excluded from parameter-error metrics).
    pub fn frozen_phi_indices(&self) -> Vec<usize> {
        match &self.phi {
            PhiRefs::Transcription { .. } => {
                let frozen = self
                    .store
                    .entries()
                    .iter()
                    .find(|e| e.name == "phi.sensitivity_first")
                    .map(|e| !e.trainable)
                    .unwrap_or(false);
                if frozen {
                    vec![1] // gene 0 sensitivity in [b0, s0, d0, b1, ...]
                } else {
                    vec![]
                }
            }
            _ => vec![],
        }
    }

    /// Force query points for a phase (ODE: times; PDE: time x space rows).
    fn force_inputs(&self, data: &ExperimentData, phase: Phase) -> Matrix {
        match &self.family {
            Family::ReactionDiffusion { mesh, n_steps } => {
                let k = mesh.n_vertices();
                let (times, rows): (Vec<f64>, usize) = match phase {
                    Phase::FineTune => {
                        let dt = self.dt.unwrap();
                        let t0 = data.times[0];
                        ((1..=*n_steps).map(|n| t0 + n as f64 * dt).collect(), *n_steps)
                    }
                    Phase::PreEstimation => (data.times.clone(), data.times.len()),
                };
                let mut pts = Matrix::zeros(rows * k, 2);
                for (i, &t) in times.iter().enumerate() {
                    for (j, &x) in mesh.vertices().iter().enumerate() {
                        pts[(i * k + j, 0)] = t;
                        pts[(i * k + j, 1)] = x;
                    }
                }
                pts
            }
            _ => match phase {
                Phase::FineTune => {
                    Matrix::from_vec(self.force_grid.len(), 1, self.force_grid.clone())
                }
                Phase::PreEstimation => {
                    Matrix::from_vec(data.times.len(), 1, data.times.clone())
                }
            },
        }
    }
}

/// Bound equation parameters for one graph.
struct PhiVars {
    basal: Option<Var>,
    sensitivity: Option<Var>,
    decay: Option<Var>,
    growth: Option<Var>,
    pde: Option<crate::fem1d::PdeVars>,
    hill: Option<(Var, Var)>,
}

fn bind_phi(model: &LfmModel, bound: &Bound) -> PhiVars {
    let hill = model
        .hill
        .map(|(w, w0)| (bound.var(w).clone(), bound.var(w0).clone()));
    match &model.phi {
        PhiRefs::Transcription {
            basal,
            sens_first,
            sens_rest,
            decay,
        } => {
            let s_first = bound.var(*sens_first).softplus();
            let s = match sens_rest {
                Some(rest) => {
                    let g = s_first.graph().clone();
                    g.concat_rows(&[s_first, bound.var(*rest).softplus()])
                }
                None => s_first,
            };
            PhiVars {
                basal: Some(bound.var(*basal).softplus()),
                sensitivity: Some(s),
                decay: Some(bound.var(*decay).softplus()),
                growth: None,
                pde: None,
                hill,
            }
        }
        PhiRefs::Lotka { growth, decay } => PhiVars {
            basal: None,
            sensitivity: None,
            decay: Some(bound.var(*decay).softplus()),
            growth: Some(bound.var(*growth).softplus()),
            pde: None,
            hill,
        },
        PhiRefs::ReactionDiffusion(p) => PhiVars {
            basal: None,
            sensitivity: None,
            decay: None,
            growth: None,
            pde: Some(p.vars(bound)),
            hill,
        },
    }
}

/// ODE right-hand side over column-stacked samples for the current family.
fn family_rhs<'a>(
    g: &'a Graph,
    model: &'a LfmModel,
    phi: &'a PhiVars,
    n_samples: usize,
) -> impl Fn(f64, &Var, &Var) -> Var + 'a {
    let ones_s = g.constant(Matrix::filled(1, n_samples, 1.0));
    move |_t: f64, y: &Var, f: &Var| -> Var {
        let gf = response_var(
            g,
            f,
            model.response,
            phi.hill.as_ref().map(|(w, w0)| (w, w0)),
            model.n_outputs,
        );
        match model.family {
            Family::Transcription { .. } => {
                let b = phi.basal.as_ref().unwrap().matmul(&ones_s);
                let s = phi.sensitivity.as_ref().unwrap().matmul(&ones_s);
                let d = phi.decay.as_ref().unwrap().matmul(&ones_s);
                &(&b + &(&s * &gf)) - &(&d * y)
            }
            Family::LotkaVolterra => {
                let delta = phi.growth.as_ref().unwrap();
                let gamma = phi.decay.as_ref().unwrap();
                &(&(&gf * y) * delta) - &(y * gamma)
            }
            Family::ReactionDiffusion { .. } => unreachable!("PDE family uses the FEM stepper"),
        }
    }
}

/// Draw per-force standard normal matrices for one epoch.
pub fn draw_eps(model: &LfmModel, data: &ExperimentData, phase: Phase, s: usize, rng: &mut Rng) -> Vec<Matrix> {
    let rows = model.eps_rows(data, phase);
    (0..model.n_forces).map(|_| rng.normal_matrix(rows, s)).collect()
}

/// ELBO split into its Monte Carlo log-likelihood term and the KL term;
/// the bound is `loglik - kl`.
pub fn elbo_parts(
    g: &Graph,
    model: &LfmModel,
    data: &ExperimentData,
    eps: &[Matrix],
    phase: Phase,
) -> Result<(Var, Var)> {
    let bound = model.store.bind(g);
    elbo_parts_bound(g, model, &bound, data, eps, phase)
}

fn elbo_parts_bound(
    g: &Graph,
    model: &LfmModel,
    bound: &Bound,
    data: &ExperimentData,
    eps: &[Matrix],
    phase: Phase,
) -> Result<(Var, Var)> {
    let n_samples = eps.first().map(|e| e.cols()).unwrap_or(1);
    let kv = model.kernel.vars(&bound);
    let vd = model.vdist.vars(g, &bound);
    let phi = bind_phi(model, &bound);
    let sigma2 = model.sigma2_var(&bound);

    let xstar = model.force_inputs(data, phase);
    let forces = sample_forces_multi(g, &vd, &model.inducing, &xstar, &kv, model.jitter, eps)?;
    let kl = kl_to_prior(g, &vd, &model.inducing, &kv, model.jitter)?;

    let loglik = match (&model.family, phase) {
        (Family::ReactionDiffusion { mesh, n_steps }, Phase::FineTune) => {
            let k = mesh.n_vertices();
            let sys = assemble(mesh)?;
            let fem = FemConsts::new(g, &sys, n_samples);
            let pv = phi.pde.as_ref().unwrap();
            let gf = response_var(g, &forces[0], model.response, None, 1);
            let y0 = Matrix::col(data.outputs.row_slice(0));
            let traj = crate::fem1d::solve_pde_var(g, &y0, &gf, *n_steps, model.dt.unwrap(), pv, &fem)?;
            // rows of the trajectory matching the observed frames
            let t0 = data.times[0];
            let dt = model.dt.unwrap();
            let mut idx = Vec::with_capacity(data.times.len() * k);
            for &t in &data.times {
                let level = ((t - t0) / dt).round() as usize;
                idx.extend(level * k..(level + 1) * k);
            }
            let at_obs = traj.select_rows(&idx);
            let target = Matrix::from_vec(
                data.times.len() * k,
                1,
                data.outputs.data().to_vec(),
            );
            let sig_rows = g
                .constant(Matrix::filled(data.times.len() * k, 1, 1.0))
                .matmul(&sigma2);
            mc_gaussian_loglik(g, &target, &at_obs, &sig_rows)
        }
        (Family::ReactionDiffusion { mesh, .. }, Phase::PreEstimation) => {
            let k = mesh.n_vertices();
            let n = data.times.len();
            let sys = assemble(mesh)?;
            // temporal spline derivative per node as the matching target
            let mut target = Matrix::zeros(n * k, 1);
            for node in 0..k {
                let series: Vec<f64> = (0..n).map(|i| data.outputs[(i, node)]).collect();
                let spline = fit_natural_cubic(&data.times, &series)?;
                for (i, d) in eval_derivative(&spline, &data.times).iter().enumerate() {
                    target[(i * k + node, 0)] = *d;
                }
            }
            // discrete Laplacian action from the FEM operator: M^{-1} (-K y)
            let mut lap = Matrix::zeros(n * k, 1);
            for i in 0..n {
                let frame: Vec<f64> = data.outputs.row_slice(i).to_vec();
                let ky = sys.stiffness.matvec(&frame);
                let neg_ky: Vec<f64> = ky.iter().map(|v| -v).collect();
                let l = sys.mass.solve(&neg_ky)?;
                for j in 0..k {
                    lap[(i * k + j, 0)] = l[j];
                }
            }
            let y_flat = Matrix::from_vec(n * k, 1, data.outputs.data().to_vec());
            let pv = phi.pde.as_ref().unwrap();
            let gf = response_var(g, &forces[0], model.response, None, 1);
            let ones = g.constant(Matrix::filled(1, n_samples, 1.0));
            let y_c = g.constant(y_flat).matmul(&ones);
            let lap_c = g.constant(lap).matmul(&ones);
            let pred = &(&(&gf * &pv.sensitivity) - &(&y_c * &pv.decay))
                + &(&lap_c * &pv.diffusion);
            let sig_rows = g.constant(Matrix::filled(n * k, 1, 1.0)).matmul(&sigma2);
            mc_gaussian_loglik(g, &target, &pred, &sig_rows)
        }
        (_, Phase::FineTune) => {
            let p = model.n_outputs;
            let n = data.times.len();
            // force path over the dense grid, column layout l-major then sample
            let samples = g.concat_cols(&forces);
            let path = ForcePath::new(g, &model.force_grid, &samples, model.n_forces, n_samples)?;
            let rhs = family_rhs(g, model, &phi, n_samples);
            let y0 = Matrix::col(data.outputs.row_slice(0))
                .matmul(&Matrix::filled(1, n_samples, 1.0));
            let problem = OdeProblem {
                y0,
                grid: &data.times,
                rhs: &rhs,
            };
            let traj = match model.solver {
                SolverChoice::Rk4 { substeps } => {
                    let h = data
                        .times
                        .windows(2)
                        .map(|w| w[1] - w[0])
                        .fold(f64::INFINITY, f64::min)
                        / substeps.max(1) as f64;
                    rk4_solve(g, &problem, &path, h)?
                }
                SolverChoice::Adaptive { rtol, atol } => {
                    adaptive_solve(g, &problem, &path, rtol, atol)?.0
                }
            };
            let target = Matrix::from_vec(n * p, 1, data.outputs.data().to_vec());
            let sig_rows = g
                .constant(Matrix::filled(n, 1, 1.0))
                .matmul(&sigma2.t())
                .reshape(n * p, 1);
            mc_gaussian_loglik(g, &target, &traj, &sig_rows)
        }
        (_, Phase::PreEstimation) => {
            let p = model.n_outputs;
            let n = data.times.len();
            // spline-interpolated data derivatives are the matching target
            let mut target = Matrix::zeros(n * p, 1);
            for j in 0..p {
                let series: Vec<f64> = (0..n).map(|i| data.outputs[(i, j)]).collect();
                let spline = fit_natural_cubic(&data.times, &series)?;
                for (i, d) in eval_derivative(&spline, &data.times).iter().enumerate() {
                    target[(i * p + j, 0)] = *d;
                }
            }
            let rhs = family_rhs(g, model, &phi, n_samples);
            let ones = g.constant(Matrix::filled(1, n_samples, 1.0));
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let f_i_cols: Vec<Var> = forces.iter().map(|f| f.select_rows(&[i])).collect();
                let f_i = g.concat_rows(&f_i_cols); // L x S
                let y_i = g
                    .constant(Matrix::col(data.outputs.row_slice(i)))
                    .matmul(&ones);
                rows.push(rhs(data.times[i], &y_i, &f_i));
            }
            let pred = g.concat_rows(&rows);
            let sig_rows = g
                .constant(Matrix::filled(n, 1, 1.0))
                .matmul(&sigma2.t())
                .reshape(n * p, 1);
            mc_gaussian_loglik(g, &target, &pred, &sig_rows)
        }
    };
    Ok((loglik, kl))
}

/// Monte Carlo ELBO: expected log-likelihood minus the KL to the prior.
pub fn elbo(
    g: &Graph,
    model: &LfmModel,
    data: &ExperimentData,
    eps: &[Matrix],
    phase: Phase,
) -> Result<Var> {
    let (loglik, kl) = elbo_parts(g, model, data, eps, phase)?;
    Ok(&loglik - &kl)
}

/// Training configuration shared by both phases.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub pre_epochs: usize,
    pub fine_epochs: usize,
    pub mc_samples: usize,
    pub metric_samples: usize,
    pub lr_pre: f64,
    pub lr_fine: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pre_epochs: 200,
            fine_epochs: 500,
            mc_samples: 5,
            metric_samples: 50,
            lr_pre: 0.01,
            lr_fine: 0.005,
            seed: 0,
        }
    }
}

/// Per-epoch ELBO trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<(usize, Phase, f64)>,
}

impl TrainTrace {
    pub fn first_fine_elbo(&self) -> Option<f64> {
        self.rows
            .iter()
            .find(|(_, p, _)| *p == Phase::FineTune)
            .map(|(_, _, e)| *e)
    }

    pub fn fine_elbos(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|(_, p, _)| *p == Phase::FineTune)
            .map(|(_, _, e)| *e)
            .collect()
    }
}

/// One optimization epoch: draw noise, evaluate the ELBO, ascend.
pub fn train_epoch(
    model: &mut LfmModel,
    data: &ExperimentData,
    phase: Phase,
    adam: &mut Adam,
    rng: &mut Rng,
    mc_samples: usize,
    epoch: usize,
) -> Result<f64> {
    let eps = draw_eps(model, data, phase, mc_samples, rng);
    let g = Graph::new();
    let bound = model.store.bind(&g);
    let (loglik, kl) = elbo_parts_bound(&g, model, &bound, data, &eps, phase)?;
    let objective = &loglik - &kl;
    let value = objective.scalar_value();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch });
    }
    let grads = g.backward(&objective);
    adam.ascend(&mut model.store, &bound, &grads);
    Ok(value)
}

/// Gradient-matching pre-estimation: optimize the ELBO with the equation
/// evaluated at the training points against spline data derivatives, with
/// no solver calls.
pub fn pretrain_gradient_match(
    model: &mut LfmModel,
    data: &ExperimentData,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    if cfg.pre_epochs == 0 {
        return Ok(());
    }
    if data.times.len() < 3 {
        return Err(Error::InvalidArgument {
            what: "pre-estimation needs at least 3 time points",
        });
    }
    let mut rng = Rng::stream(cfg.seed, 0xA1);
    let mut adam = Adam::new(&model.store, cfg.lr_pre);
    for e in 0..cfg.pre_epochs {
        let v = train_epoch(model, data, Phase::PreEstimation, &mut adam, &mut rng, cfg.mc_samples, e)?;
        trace.rows.push((e, Phase::PreEstimation, v));
    }
    Ok(())
}

/// Full scheme: pre-estimation followed by fine-tuning with the forward
/// solution. The trace accumulates one row per epoch and is preserved on
/// error.
pub fn train(
    model: &mut LfmModel,
    data: &ExperimentData,
    cfg: &TrainConfig,
    trace: &mut TrainTrace,
) -> Result<()> {
    pretrain_gradient_match(model, data, cfg, trace)?;
    let mut rng = Rng::stream(cfg.seed, 0xA2);
    let mut adam = Adam::new(&model.store, cfg.lr_fine);
    for e in 0..cfg.fine_epochs {
        let v = train_epoch(model, data, Phase::FineTune, &mut adam, &mut rng, cfg.mc_samples, e)?;
        trace.rows.push((e, Phase::FineTune, v));
    }
    Ok(())
}

/// Analytic posterior mean and standard deviation of each latent force at
/// the query inputs.
pub fn latent_posterior(model: &LfmModel, xquery: &Matrix) -> Result<(Matrix, Matrix)> {
    let g = Graph::new();
    let bound = model.store.bind(&g);
    let kv = model.kernel.vars(&bound);
    let vd = model.vdist.vars(&g, &bound);
    let res = crate::svgp::predictive(&g, &vd, &model.inducing, xquery, &kv, model.jitter)?;
    let n = xquery.rows();
    let mut mean = Matrix::zeros(n, model.n_forces);
    let mut std = Matrix::zeros(n, model.n_forces);
    for (i, (m, s)) in res.iter().enumerate() {
        let mv = m.value();
        let sv = s.value();
        for r in 0..n {
            mean[(r, i)] = mv[(r, 0)];
            std[(r, i)] = sv[(r, r)].max(0.0).sqrt();
        }
    }
    Ok((mean, std))
}

/// Apply the model's response to latent values (for ground-truth comparison
/// where only `G(f)` is identified).
pub fn response_of_latent(model: &LfmModel, latent: &Matrix) -> Matrix {
    match model.response {
        ResponseKind::Identity => latent.clone(),
        ResponseKind::Softplus => latent.map(softplus_scalar),
        ResponseKind::Hill => latent.clone(),
    }
}

/// Monte Carlo forward prediction: mean and standard deviation of the
/// solver outputs over `n_samples` force draws at the given grid.
pub fn predict_outputs(
    model: &LfmModel,
    data: &ExperimentData,
    grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    let mut rng = Rng::stream(seed, 0xE7);
    let g = Graph::new();
    let bound = model.store.bind(&g);
    let kv = model.kernel.vars(&bound);
    let vd = model.vdist.vars(&g, &bound);
    let phi = bind_phi(model, &bound);
    if *grid.last().unwrap() > *model.force_grid.last().unwrap() + 1e-12 {
        return Err(Error::InvalidArgument {
            what: "prediction grid exceeds the force grid horizon",
        });
    }
    let grid_cover: Vec<f64> = model.force_grid.clone();
    let xstar = Matrix::from_vec(grid_cover.len(), 1, grid_cover.clone());
    let eps: Vec<Matrix> = (0..model.n_forces)
        .map(|_| rng.normal_matrix(grid_cover.len(), n_samples))
        .collect();
    let forces =
        sample_forces_multi(&g, &vd, &model.inducing, &xstar, &kv, model.jitter, &eps)?;
    let samples = g.concat_cols(&forces);
    let path = ForcePath::new(&g, &grid_cover, &samples, model.n_forces, n_samples)?;
    let rhs = family_rhs(&g, model, &phi, n_samples);
    let y0 = Matrix::col(data.outputs.row_slice(0)).matmul(&Matrix::filled(1, n_samples, 1.0));
    let problem = OdeProblem {
        y0,
        grid,
        rhs: &rhs,
    };
    let traj = match model.solver {
        SolverChoice::Rk4 { substeps } => {
            let h = grid
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min)
                / substeps.max(1) as f64;
            rk4_solve(&g, &problem, &path, h)?
        }
        SolverChoice::Adaptive { rtol, atol } => adaptive_solve(&g, &problem, &path, rtol, atol)?.0,
    };
    let v = traj.value(); // (N*P) x S
    let p = model.n_outputs;
    let n = grid.len();
    let mut mean = Matrix::zeros(n, p);
    let mut std = Matrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let row = i * p + j;
            let mut m = 0.0;
            for s in 0..n_samples {
                m += v[(row, s)];
            }
            m /= n_samples as f64;
            let mut var = 0.0;
            for s in 0..n_samples {
                let d = v[(row, s)] - m;
                var += d * d;
            }
            mean[(i, j)] = m;
            std[(i, j)] = (var / n_samples as f64).sqrt();
        }
    }
    Ok((mean, std))
}
