//! Synthetic ground-truth generators. Real datasets are replaced by
//! generators with known forces and parameters so that latent-force
//! recovery can be scored against the truth.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::Result;
use crate::fem1d::{assemble, solve_pde, Mesh1D, PdeParams};
use crate::graph::softplus_scalar;
use crate::interp::fit_natural_cubic;
use crate::kernels::{kernel_matrix, KernelKind, KernelParams};
use crate::lfm::ExperimentData;
use crate::matrix::Matrix;
use crate::odesolve::rk4_solve_plain;
use crate::rng::Rng;

/// One pathwise GP draw at the rows of `x`.
pub fn gp_draw(rng: &mut Rng, kind: KernelKind, params: &KernelParams, x: &Matrix) -> Result<Vec<f64>> {
    let k = kernel_matrix(x, x, kind, params)?;
    let l = k.cholesky(1e-8)?;
    let e = rng.normal_matrix(x.rows(), 1);
    Ok(l.matmul(&e).into_data())
}

/// Ground truth for one transcription instance on a fixed solution grid.
#[derive(Clone, Debug)]
pub struct TranscriptionInstance {
    pub times: Vec<f64>,
    /// Noiseless solution, grid x genes.
    pub solution: Matrix,
    /// Solution with observation noise added.
    pub noisy: Matrix,
    /// True latent force at the grid times.
    pub force: Vec<f64>,
    /// Gene-major `[b_j, s_j, d_j]`.
    pub params: Vec<f64>,
}

/// Transcription dynamics with the gene-0 sensitivity pinned to 1 so the
/// latent force scale is identified across instances.
pub fn transcription_instance(
    seed: u64,
    genes: usize,
    grid: &[f64],
    force_lengthscale: f64,
    noise: f64,
) -> Result<TranscriptionInstance> {
    transcription_instance_streamed(seed, 0x10, genes, grid, force_lengthscale, noise)
}

/// Per-index stream variant: instance `i` of a dataset uses
/// `stream_base = 0x1000 + 4 * i`, so instance content is independent of
/// the dataset size (prefix property).
pub fn transcription_instance_streamed(
    seed: u64,
    stream_base: u64,
    genes: usize,
    grid: &[f64],
    force_lengthscale: f64,
    noise: f64,
) -> Result<TranscriptionInstance> {
    let mut rng_force = Rng::stream(seed, stream_base);
    let mut rng_phi = Rng::stream(seed, stream_base + 1);
    let mut rng_noise = Rng::stream(seed, stream_base + 2);

    let x = Matrix::from_vec(grid.len(), 1, grid.to_vec());
    let kp = KernelParams::rbf(vec![force_lengthscale], 1.0);
    let force = gp_draw(&mut rng_force, KernelKind::Rbf, &kp, &x)?;

    let mut params = Vec::with_capacity(3 * genes);
    for j in 0..genes {
        let b = rng_phi.uniform();
        let s = if j == 0 { 1.0 } else { rng_phi.uniform() };
        let d = rng_phi.uniform();
        params.push(b);
        params.push(s);
        params.push(d);
    }

    let spline = fit_natural_cubic(grid, &force)?;
    let p = params.clone();
    let rhs = move |t: f64, y: &[f64]| -> Vec<f64> {
        let f = spline.eval(t);
        (0..y.len())
            .map(|j| p[3 * j] + p[3 * j + 1] * f - p[3 * j + 2] * y[j])
            .collect()
    };
    let y0 = vec![0.0; genes];
    let solution = rk4_solve_plain(&y0, grid, 8, rhs);
    let mut noisy = solution.clone();
    for v in noisy.data_mut() {
        *v += noise * rng_noise.normal();
    }
    Ok(TranscriptionInstance {
        times: grid.to_vec(),
        solution,
        noisy,
        force,
        params,
    })
}

/// A transcription training task: sparse noisy observations plus the dense
/// truth used for scoring.
#[derive(Clone, Debug)]
pub struct TranscriptionExperiment {
    pub data: ExperimentData,
    /// Noiseless outputs at the observation times.
    pub clean_outputs: Matrix,
    /// Dense grid spanning the data window.
    pub latent_grid: Vec<f64>,
    /// True force on the dense grid.
    pub latent_force: Vec<f64>,
    pub params: Vec<f64>,
}

pub fn transcription_experiment(
    seed: u64,
    genes: usize,
    n_obs: usize,
    t_span: f64,
    noise: f64,
) -> Result<TranscriptionExperiment> {
    let factor = 8;
    let dense_n = (n_obs - 1) * factor + 1;
    let dense: Vec<f64> = (0..dense_n)
        .map(|i| t_span * i as f64 / (dense_n - 1) as f64)
        .collect();
    let inst = transcription_instance(seed, genes, &dense, t_span / 4.0, noise)?;
    let obs_idx: Vec<usize> = (0..n_obs).map(|i| i * factor).collect();
    let times: Vec<f64> = obs_idx.iter().map(|&i| dense[i]).collect();
    let mut outputs = Matrix::zeros(n_obs, genes);
    let mut clean = Matrix::zeros(n_obs, genes);
    for (r, &i) in obs_idx.iter().enumerate() {
        for j in 0..genes {
            outputs[(r, j)] = inst.noisy[(i, j)];
            clean[(r, j)] = inst.solution[(i, j)];
        }
    }
    Ok(TranscriptionExperiment {
        data: ExperimentData {
            times,
            outputs,
            space: None,
        },
        clean_outputs: clean,
        latent_grid: dense,
        latent_force: inst.force,
        params: inst.params,
    })
}

/// Predator-prey ground truth from the full two-equation system
/// (both interaction coefficients fixed to 1 for generation).
#[derive(Clone, Debug)]
pub struct LotkaExperiment {
    /// Noisy predator observations over the training window.
    pub data: ExperimentData,
    /// Held-out window times and true predator values.
    pub eval_times: Vec<f64>,
    pub eval_predator: Vec<f64>,
    /// Dense grid over the full window and the true prey (latent force).
    pub dense_grid: Vec<f64>,
    pub prey: Vec<f64>,
    /// `[growth, decay]` of the predator equation.
    pub params: Vec<f64>,
}

pub fn lotka_experiment(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    t_train: f64,
    t_end: f64,
    noise: f64,
) -> Result<LotkaExperiment> {
    let mut rng_noise = Rng::stream(seed, 0x21);
    let (alpha, beta, delta, gamma) = (1.0, 1.0, 1.0, 1.0);
    let dense_n = 512;
    let dense: Vec<f64> = (0..dense_n)
        .map(|i| t_end * i as f64 / (dense_n - 1) as f64)
        .collect();
    let rhs = move |_t: f64, s: &[f64]| -> Vec<f64> {
        let (u, v) = (s[0], s[1]);
        vec![alpha * u - beta * u * v, delta * u * v - gamma * v]
    };
    let full = rk4_solve_plain(&[2.0, 1.0], &dense, 4, rhs);

    let sample_at = |t: f64| -> (f64, f64) {
        let pos = t / t_end * (dense_n - 1) as f64;
        let i = (pos.round() as usize).min(dense_n - 1);
        (full[(i, 0)], full[(i, 1)])
    };
    let train_times: Vec<f64> = (0..n_train)
        .map(|i| t_train * i as f64 / (n_train - 1) as f64)
        .collect();
    let mut outputs = Matrix::zeros(n_train, 1);
    for (r, &t) in train_times.iter().enumerate() {
        outputs[(r, 0)] = sample_at(t).1 + noise * rng_noise.normal();
    }
    let eval_times: Vec<f64> = (0..n_eval)
        .map(|i| t_train + (t_end - t_train) * (i + 1) as f64 / n_eval as f64)
        .collect();
    let eval_predator: Vec<f64> = eval_times.iter().map(|&t| sample_at(t).1).collect();
    let prey: Vec<f64> = dense.iter().map(|&t| sample_at(t).0).collect();
    Ok(LotkaExperiment {
        data: ExperimentData {
            times: train_times,
            outputs,
            space: None,
        },
        eval_times,
        eval_predator,
        dense_grid: dense,
        prey,
        params: vec![delta, gamma],
    })
}

/// Reaction-diffusion ground truth from a refined-grid FEM solve restricted
/// to the model mesh.
#[derive(Clone, Debug)]
pub struct ReactionDiffusionExperiment {
    pub data: ExperimentData,
    /// Noiseless frames at the observation times.
    pub clean_outputs: Matrix,
    /// True force on the (frame time x mesh vertex) lattice.
    pub force: Matrix,
    /// `[sensitivity, decay, diffusion]`.
    pub params: Vec<f64>,
}

pub fn reaction_diffusion_experiment(
    seed: u64,
    mesh: &Mesh1D,
    n_frames: usize,
    t_end: f64,
    noise: f64,
) -> Result<ReactionDiffusionExperiment> {
    reaction_diffusion_experiment_streamed(seed, 0x31, mesh, n_frames, t_end, noise)
}

/// Per-index stream variant for dataset generation (prefix property).
pub fn reaction_diffusion_experiment_streamed(
    seed: u64,
    stream_base: u64,
    mesh: &Mesh1D,
    n_frames: usize,
    t_end: f64,
    noise: f64,
) -> Result<ReactionDiffusionExperiment> {
    let mut rng_force = Rng::stream(seed, stream_base);
    let mut rng_phi = Rng::stream(seed, stream_base + 1);
    let mut rng_noise = Rng::stream(seed, stream_base + 2);

    let params = PdeParams {
        sensitivity: rng_phi.uniform_in(0.4, 1.0),
        decay: rng_phi.uniform_in(0.1, 0.8),
        diffusion: rng_phi.uniform_in(0.05, 0.4),
    };

    // refine 2x in space, 5x in time relative to the frame spacing
    let fine_vertices: Vec<f64> = {
        let mut v = Vec::new();
        for e in 0..mesh.n_elements() {
            let a = mesh.vertices()[e];
            let b = mesh.vertices()[e + 1];
            v.push(a);
            v.push(0.5 * (a + b));
        }
        v.push(mesh.length());
        v
    };
    let fine_mesh = Mesh1D::from_vertices(fine_vertices.clone())?;
    let fine_sys = assemble(&fine_mesh)?;
    let steps = (n_frames - 1) * 5;
    let dt = t_end / steps as f64;

    // positive force: softplus of a separable smooth GP draw over (t, x)
    let kf = fine_mesh.n_vertices();
    let step_times: Vec<f64> = (1..=steps).map(|n| n as f64 * dt).collect();
    let mut pts = Matrix::zeros(steps * kf, 2);
    for (i, &t) in step_times.iter().enumerate() {
        for (j, &x) in fine_mesh.vertices().iter().enumerate() {
            pts[(i * kf + j, 0)] = t;
            pts[(i * kf + j, 1)] = x;
        }
    }
    let kp = KernelParams::rbf(vec![t_end / 3.0, mesh.length() / 3.0], 1.0);
    let raw = gp_draw(&mut rng_force, KernelKind::Rbf, &kp, &pts)?;
    let force_fine = Matrix::from_vec(
        steps,
        kf,
        raw.iter().map(|&v| softplus_scalar(v)).collect(),
    );

    let y0 = vec![0.0; kf];
    let traj_fine = solve_pde(&y0, &force_fine, dt, &params, &fine_sys)?;

    // restrict to the model mesh (coarse vertex i sits at fine vertex 2i)
    let k = mesh.n_vertices();
    let n_obs = n_frames;
    let mut clean = Matrix::zeros(n_obs, k);
    let mut force = Matrix::zeros(n_obs, k);
    let mut times = Vec::with_capacity(n_obs);
    for f in 0..n_obs {
        let level = f * 5;
        times.push(level as f64 * dt);
        for j in 0..k {
            clean[(f, j)] = traj_fine[(level, 2 * j)];
            // force rows are defined at levels 1..=steps
            let fl = if level == 0 { 0 } else { level - 1 };
            force[(f, j)] = force_fine[(fl, 2 * j)];
        }
    }
    let mut noisy = clean.clone();
    for v in noisy.data_mut() {
        *v += noise * rng_noise.normal();
    }
    Ok(ReactionDiffusionExperiment {
        data: ExperimentData {
            times,
            outputs: noisy,
            space: Some(mesh.vertices().to_vec()),
        },
        clean_outputs: clean,
        force,
        params: vec![params.sensitivity, params.decay, params.diffusion],
    })
}
