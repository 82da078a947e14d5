//! Latent Force Operator: a spectral neural operator mapping solution
//! fields to the latent-force posterior mean and variance, amortizing
//! inference across generated instances.
//!
//! The network lifts the input channels pointwise, applies 4 Fourier layers
//! (spectral convolution plus a local linear map, GELU between layers),
//! a width-3 boundary convolution, and projects pointwise to mean and
//! (softplus-positive) variance per latent force. Spectral weights act on
//! truncated DFT coefficients, so the same weights evaluate on any grid
//! with at least `2 * modes` points.

use alloc::format;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamRef, ParamStore};
use crate::rng::Rng;

const TWO_PI: f64 = 2.0 * core::f64::consts::PI;

/// Spatial layout of one instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridDims {
    One(usize),
    Two(usize, usize),
}

impl GridDims {
    pub fn total(&self) -> usize {
        match *self {
            GridDims::One(n) => n,
            GridDims::Two(n1, n2) => n1 * n2,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LfoConfig {
    pub width: usize,
    pub modes1: usize,
    /// Axis-2 modes; `Some` selects the 2D transform.
    pub modes2: Option<usize>,
    pub in_channels: usize,
    pub out_forces: usize,
    /// Size of the auxiliary pooled parameter head (0 disables it).
    pub n_params: usize,
    pub seed: u64,
}

struct LayerRefs {
    r_re: ParamRef,
    r_im: ParamRef,
    w: ParamRef,
    b: ParamRef,
}

/// The operator network: parameters plus frozen input standardization.
pub struct LfoNet {
    pub cfg: LfoConfig,
    pub store: ParamStore,
    lift_w: ParamRef,
    lift_b: ParamRef,
    layers: Vec<LayerRefs>,
    conv_w: [ParamRef; 3],
    conv_b: ParamRef,
    proj_w: ParamRef,
    proj_b: ParamRef,
    head_w: Option<ParamRef>,
    head_b: Option<ParamRef>,
    in_mean: ParamRef,
    in_std: ParamRef,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = rng.normal_matrix(rows, cols);
    for v in m.data_mut() {
        *v *= scale;
    }
    m
}

impl LfoNet {
    pub fn new(cfg: LfoConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(cfg.seed, 0x900);
        let w = cfg.width;
        let n_modes = match cfg.modes2 {
            None => cfg.modes1,
            Some(m2) => 2 * cfg.modes1 * m2,
        };
        let lift_scale = 1.0 / (cfg.in_channels as f64).sqrt();
        let lift_w = store.add(
            "lift.w",
            normal_matrix(&mut rng, cfg.in_channels, w, lift_scale),
        );
        let lift_b = store.add("lift.b", Matrix::zeros(w, 1));
        let spec_scale = 1.0 / w as f64;
        let mix_scale = 1.0 / (w as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..4 {
            layers.push(LayerRefs {
                r_re: store.add(
                    &format!("fourier{l}.r_re"),
                    normal_matrix(&mut rng, n_modes * w, w, spec_scale),
                ),
                r_im: store.add(
                    &format!("fourier{l}.r_im"),
                    normal_matrix(&mut rng, n_modes * w, w, spec_scale),
                ),
                w: store.add(
                    &format!("fourier{l}.w"),
                    normal_matrix(&mut rng, w, w, mix_scale),
                ),
                b: store.add(&format!("fourier{l}.b"), Matrix::zeros(w, 1)),
            });
        }
        let conv_w = [
            store.add("boundary.w_m1", normal_matrix(&mut rng, w, w, mix_scale)),
            store.add("boundary.w_0", normal_matrix(&mut rng, w, w, mix_scale)),
            store.add("boundary.w_p1", normal_matrix(&mut rng, w, w, mix_scale)),
        ];
        let conv_b = store.add("boundary.b", Matrix::zeros(w, 1));
        let out_ch = 2 * cfg.out_forces;
        let proj_w = store.add("proj.w", normal_matrix(&mut rng, w, out_ch, mix_scale));
        let proj_b = store.add("proj.b", Matrix::zeros(out_ch, 1));
        let (head_w, head_b) = if cfg.n_params > 0 {
            (
                Some(store.add(
                    "head.w",
                    normal_matrix(&mut rng, w, cfg.n_params, mix_scale),
                )),
                Some(store.add("head.b", Matrix::zeros(cfg.n_params, 1))),
            )
        } else {
            (None, None)
        };
        let in_mean = store.add_frozen("norm.mean", Matrix::zeros(cfg.in_channels, 1));
        let in_std = store.add_frozen("norm.std", Matrix::filled(cfg.in_channels, 1, 1.0));
        LfoNet {
            cfg,
            store,
            lift_w,
            lift_b,
            layers,
            conv_w,
            conv_b,
            proj_w,
            proj_b,
            head_w,
            head_b,
            in_mean,
            in_std,
        }
    }

    /// Set the frozen per-channel input standardization.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) {
        self.store.set_value(self.in_mean, Matrix::col(mean));
        self.store.set_value(
            self.in_std,
            Matrix::col(&std.iter().map(|&s| s.max(1e-8)).collect::<Vec<_>>()),
        );
    }
}

/// Forward/inverse DFT constants for one axis at the kept modes.
struct DftMats {
    fwd_cos: Matrix,
    fwd_sin: Matrix,
    inv_cos: Matrix,
    inv_sin: Matrix,
}

/// Modes `0..k_max` with conjugate-pair weights in the inverse (real
/// signal reconstruction).
fn dft_half(n: usize, k_max: usize) -> DftMats {
    let mut fwd_cos = Matrix::zeros(n, k_max);
    let mut fwd_sin = Matrix::zeros(n, k_max);
    let mut inv_cos = Matrix::zeros(k_max, n);
    let mut inv_sin = Matrix::zeros(k_max, n);
    for j in 0..n {
        for k in 0..k_max {
            let th = TWO_PI * (j * k) as f64 / n as f64;
            fwd_cos[(j, k)] = th.cos();
            fwd_sin[(j, k)] = th.sin();
            let c = if k == 0 { 1.0 } else { 2.0 };
            inv_cos[(k, j)] = c * th.cos() / n as f64;
            inv_sin[(k, j)] = c * th.sin() / n as f64;
        }
    }
    DftMats {
        fwd_cos,
        fwd_sin,
        inv_cos,
        inv_sin,
    }
}

/// Signed axis-1 modes `0..m1` and `n-m1..n` (the negative block), no
/// conjugate weighting: both halves are carried explicitly.
fn dft_signed(n: usize, m1: usize) -> DftMats {
    let ks: Vec<usize> = (0..m1).chain(n - m1..n).collect();
    let m = ks.len();
    let mut fwd_cos = Matrix::zeros(n, m);
    let mut fwd_sin = Matrix::zeros(n, m);
    let mut inv_cos = Matrix::zeros(m, n);
    let mut inv_sin = Matrix::zeros(m, n);
    for j in 0..n {
        for (col, &k) in ks.iter().enumerate() {
            let th = TWO_PI * (j * k) as f64 / n as f64;
            fwd_cos[(j, col)] = th.cos();
            fwd_sin[(j, col)] = th.sin();
            inv_cos[(col, j)] = th.cos() / n as f64;
            inv_sin[(col, j)] = th.sin() / n as f64;
        }
    }
    DftMats {
        fwd_cos,
        fwd_sin,
        inv_cos,
        inv_sin,
    }
}

/// Per-mode complex channel mixing. `x_re/x_im` are `(B*W) x M`; weight
/// blocks are stacked `(M*W) x W`. Returns the mixed `(B*W) x M` pair.
fn mix_modes(
    g: &Graph,
    x_re: &Var,
    x_im: &Var,
    r_re: &Var,
    r_im: &Var,
    width: usize,
    batch: usize,
    n_modes: usize,
) -> (Var, Var) {
    let mut out_re = Vec::with_capacity(n_modes);
    let mut out_im = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let rows: Vec<usize> = (k * width..(k + 1) * width).collect();
        let rk_re = r_re.select_rows(&rows);
        let rk_im = r_im.select_rows(&rows);
        let a = x_re.select_cols(&[k]).reshape(batch, width);
        let b = x_im.select_cols(&[k]).reshape(batch, width);
        let yre = &a.matmul(&rk_re) - &b.matmul(&rk_im);
        let yim = &a.matmul(&rk_im) + &b.matmul(&rk_re);
        out_re.push(yre.reshape(batch * width, 1));
        out_im.push(yim.reshape(batch * width, 1));
    }
    (g.concat_cols(&out_re), g.concat_cols(&out_im))
}

/// Spectral convolution in the channel-stacked layout `(B*W) x grid`:
/// truncated forward transform, per-mode complex mixing by the layer
/// weights, inverse transform back to the grid.
fn spectral_conv_batch(
    g: &Graph,
    x_cw: &Var,
    r_re: &Var,
    r_im: &Var,
    cfg: &LfoConfig,
    batch: usize,
    dims: GridDims,
) -> Result<Var> {
    let w = cfg.width;
    match dims {
        GridDims::One(n) => {
            if n < 2 * cfg.modes1 {
                return Err(Error::GridTooSmall {
                    grid: n,
                    required: 2 * cfg.modes1,
                });
            }
            let mats = dft_half(n, cfg.modes1);
            let fc = g.constant(mats.fwd_cos);
            let fs = g.constant(mats.fwd_sin);
            let x_re = x_cw.matmul(&fc);
            let x_im = x_cw.matmul(&fs).neg();
            let (y_re, y_im) = mix_modes(g, &x_re, &x_im, r_re, r_im, w, batch, cfg.modes1);
            let ic = g.constant(mats.inv_cos);
            let is = g.constant(mats.inv_sin);
            Ok(&y_re.matmul(&ic) - &y_im.matmul(&is))
        }
        GridDims::Two(n1, n2) => {
            let m2 = cfg.modes2.expect("2D transform requires modes2");
            if n1 < 2 * cfg.modes1 {
                return Err(Error::GridTooSmall {
                    grid: n1,
                    required: 2 * cfg.modes1,
                });
            }
            if n2 < 2 * m2 {
                return Err(Error::GridTooSmall {
                    grid: n2,
                    required: 2 * m2,
                });
            }
            let bw = batch * w;
            let ax2 = dft_half(n2, m2);
            let ax1 = dft_signed(n1, cfg.modes1);
            let k1 = 2 * cfg.modes1;
            // axis 2 (last axis) first
            let x2 = x_cw.reshape(bw * n1, n2);
            let a_re = x2.matmul(&g.constant(ax2.fwd_cos.clone()));
            let a_im = x2.matmul(&g.constant(ax2.fwd_sin.clone())).neg();
            // swap: (BW*n1) x m2 -> (BW*m2) x n1
            let a_re = a_re.transpose_within(n1);
            let a_im = a_im.transpose_within(n1);
            // axis 1 full complex DFT at the signed modes
            let c1 = g.constant(ax1.fwd_cos.clone());
            let s1 = g.constant(ax1.fwd_sin.clone());
            let f_re = &a_re.matmul(&c1) + &a_im.matmul(&s1);
            let f_im = &a_im.matmul(&c1) - &a_re.matmul(&s1);
            // flatten mode pairs to columns (k2 * k1 + col1)
            let f_re = f_re.reshape(bw, m2 * k1);
            let f_im = f_im.reshape(bw, m2 * k1);
            let (y_re, y_im) = mix_modes(g, &f_re, &f_im, r_re, r_im, w, batch, m2 * k1);
            // inverse along axis 1
            let y_re = y_re.reshape(bw * m2, k1);
            let y_im = y_im.reshape(bw * m2, k1);
            let ic1 = g.constant(ax1.inv_cos);
            let is1 = g.constant(ax1.inv_sin);
            let b_re = &y_re.matmul(&ic1) - &y_im.matmul(&is1);
            let b_im = &y_im.matmul(&ic1) + &y_re.matmul(&is1);
            // swap back: (BW*m2) x n1 -> (BW*n1) x m2
            let b_re = b_re.transpose_within(m2);
            let b_im = b_im.transpose_within(m2);
            // inverse along axis 2 with the real part extracted
            let ic2 = g.constant(ax2.inv_cos);
            let is2 = g.constant(ax2.inv_sin);
            let out = &b_re.matmul(&ic2) - &b_im.matmul(&is2);
            Ok(out.reshape(bw, n1 * n2))
        }
    }
}

/// Single-instance spectral convolution: `x` is `width x grid`, mixed by
/// the stacked complex weights, keeping modes `0..k_max`.
pub fn spectral_conv(
    g: &Graph,
    x: &Var,
    r_re: &Var,
    r_im: &Var,
    k_max: usize,
) -> Result<Var> {
    let (width, n) = x.shape();
    let cfg = LfoConfig {
        width,
        modes1: k_max,
        modes2: None,
        in_channels: 1,
        out_forces: 1,
        n_params: 0,
        seed: 0,
    };
    spectral_conv_batch(g, x, r_re, r_im, &cfg, 1, GridDims::One(n))
}

fn gelu(x: &Var) -> Var {
    // tanh approximation of the Gaussian error linear unit
    let c = (2.0 / core::f64::consts::PI).sqrt();
    let inner = &(x + &x.powi(3).scale(0.044715)).scale(c);
    let t = inner.tanh().offset(1.0).scale(0.5);
    x * &t
}

fn row_broadcast(g: &Graph, rows: usize, bias: &Var) -> Var {
    g.constant(Matrix::filled(rows, 1, 1.0)).matmul(&bias.t())
}

/// Network output for a batch.
pub struct LfoOutput {
    /// `(B*grid) x L` posterior mean.
    pub mean: Var,
    /// `(B*grid) x L` strictly positive posterior variance.
    pub variance: Var,
    /// `B x n_params` pooled parameter estimates, when the head exists.
    pub params: Option<Var>,
}

/// Forward pass. `input` is `(B*grid) x in_channels`, raw (the frozen
/// normalization is applied inside).
pub fn lfo_forward_batch(
    g: &Graph,
    net: &LfoNet,
    bound: &Bound,
    input: &Matrix,
    batch: usize,
    dims: GridDims,
) -> Result<LfoOutput> {
    let grid = dims.total();
    let w = net.cfg.width;
    if input.cols() != net.cfg.in_channels {
        return Err(Error::ChannelMismatch {
            expected: net.cfg.in_channels,
            got: input.cols(),
        });
    }
    if input.rows() != batch * grid {
        return Err(Error::DimensionMismatch {
            expected: (batch * grid, net.cfg.in_channels),
            got: input.shape(),
        });
    }
    let rows = batch * grid;
    // frozen standardization
    let mean_row = row_broadcast(g, rows, bound.var(net.in_mean));
    let std_row = row_broadcast(g, rows, bound.var(net.in_std));
    let x = &(&g.constant(input.clone()) - &mean_row) / &std_row;
    // pointwise lifting
    let mut h_nw = &x.matmul(bound.var(net.lift_w)) + &row_broadcast(g, rows, bound.var(net.lift_b));
    // Fourier layers
    for (l, layer) in net.layers.iter().enumerate() {
        let h_cw = h_nw.transpose_within(grid);
        let s_cw = spectral_conv_batch(
            g,
            &h_cw,
            bound.var(layer.r_re),
            bound.var(layer.r_im),
            &net.cfg,
            batch,
            dims,
        )?;
        let s_nw = s_cw.transpose_within(w);
        let w_nw = &h_nw.matmul(bound.var(layer.w)) + &row_broadcast(g, rows, bound.var(layer.b));
        let z = &s_nw + &w_nw;
        h_nw = if l + 1 < net.layers.len() { gelu(&z) } else { z };
    }
    // width-3 boundary convolution along the (last) spatial axis
    let h_cw = h_nw.transpose_within(grid);
    let mut conv: Option<Var> = None;
    for (o, wref) in [(-1isize, net.conv_w[0]), (0, net.conv_w[1]), (1, net.conv_w[2])] {
        let shifted = match dims {
            GridDims::One(n) => {
                let _ = n;
                h_cw.shift_cols(o)
            }
            GridDims::Two(n1, n2) => h_cw
                .reshape(batch * w * n1, n2)
                .shift_cols(o)
                .reshape(batch * w, n1 * n2),
        };
        let t_nw = shifted.transpose_within(w);
        let term = t_nw.matmul(bound.var(wref));
        conv = Some(match conv {
            Some(acc) => &acc + &term,
            None => term,
        });
    }
    let feats = gelu(&(&conv.unwrap() + &row_broadcast(g, rows, bound.var(net.conv_b))));
    // pointwise projection to mean and raw variance
    let out = &feats.matmul(bound.var(net.proj_w)) + &row_broadcast(g, rows, bound.var(net.proj_b));
    let l_forces = net.cfg.out_forces;
    let mean_cols: Vec<usize> = (0..l_forces).collect();
    let var_cols: Vec<usize> = (l_forces..2 * l_forces).collect();
    let mean = out.select_cols(&mean_cols);
    let variance = out.select_cols(&var_cols).softplus().offset(1e-6);
    // pooled parameter head over the grid
    let params = match (net.head_w, net.head_b) {
        (Some(hw), Some(hb)) => {
            let mut pool = Matrix::zeros(batch, rows);
            for b in 0..batch {
                for j in 0..grid {
                    pool[(b, b * grid + j)] = 1.0 / grid as f64;
                }
            }
            let pooled = g.constant(pool).matmul(&feats);
            Some(&pooled.matmul(bound.var(hw)) + &row_broadcast(g, batch, bound.var(hb)))
        }
        _ => None,
    };
    Ok(LfoOutput {
        mean,
        variance,
        params,
    })
}

/// Solution channels stacked with normalized coordinate channel(s).
pub fn assemble_input(solution: &Matrix, dims: GridDims) -> Matrix {
    let grid = dims.total();
    assert_eq!(solution.rows() % grid, 0);
    let batch = solution.rows() / grid;
    let p = solution.cols();
    let n_coord = match dims {
        GridDims::One(_) => 1,
        GridDims::Two(_, _) => 2,
    };
    let mut out = Matrix::zeros(solution.rows(), p + n_coord);
    for b in 0..batch {
        for j in 0..grid {
            let r = b * grid + j;
            for c in 0..p {
                out[(r, c)] = solution[(r, c)];
            }
            match dims {
                GridDims::One(n) => {
                    out[(r, p)] = j as f64 / n as f64;
                }
                GridDims::Two(n1, n2) => {
                    out[(r, p)] = (j / n2) as f64 / n1 as f64;
                    out[(r, p + 1)] = (j % n2) as f64 / n2 as f64;
                }
            }
        }
    }
    out
}

/// Amortized single-instance inference: posterior force mean and standard
/// deviation on the instance grid.
pub fn infer(net: &LfoNet, solution: &Matrix, dims: GridDims) -> Result<(Matrix, Matrix)> {
    let g = Graph::new();
    let bound = net.store.bind(&g);
    let input = assemble_input(solution, dims);
    let out = lfo_forward_batch(&g, net, &bound, &input, 1, dims)?;
    let mean = out.mean.value();
    let sigma = out.variance.value().map(|v| v.sqrt());
    Ok((mean, sigma))
}

/// One generated system instance on a fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `grid x P` noisy solution field.
    pub solution: Matrix,
    /// `grid x L` noiseless latent force.
    pub force: Matrix,
    /// Equation parameters used to generate the instance.
    pub params: Vec<f64>,
    pub times: Vec<f64>,
    pub space: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub grid: GridDims,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
    pub family: String,
    pub skips: Vec<usize>,
    pub t_span: f64,
}

#[derive(Clone, Debug)]
pub struct InstanceDataset {
    pub manifest: DatasetManifest,
    pub instances: Vec<Instance>,
}

/// Model family an instance dataset is generated from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetFamily {
    Transcription { genes: usize },
    ReactionDiffusion { elements: usize },
}

impl DatasetFamily {
    pub fn name(&self) -> String {
        match self {
            DatasetFamily::Transcription { .. } => "transcription".to_string(),
            DatasetFamily::ReactionDiffusion { .. } => "reaction_diffusion".to_string(),
        }
    }
}

pub const DATASET_NOISE: f64 = 0.05;

/// Generate `n` instances with equation parameters drawn from U(0,1)
/// priors (gene-0 sensitivity pinned) and forces drawn from the GP prior.
/// Instance `i` depends only on `(seed, i)`; generation failures are
/// skipped and recorded in the manifest.
pub fn generate_dataset(
    family: &DatasetFamily,
    n: usize,
    dims: GridDims,
    t_span: f64,
    seed: u64,
) -> Result<InstanceDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument {
            what: "dataset needs at least one instance",
        });
    }
    let mut instances = Vec::with_capacity(n);
    let mut skips = Vec::new();
    for i in 0..n {
        match generate_instance(family, i, dims, t_span, seed) {
            Ok(inst) => instances.push(inst),
            Err(_) => skips.push(i),
        }
    }
    let channels = match family {
        DatasetFamily::Transcription { genes } => *genes,
        DatasetFamily::ReactionDiffusion { .. } => 1,
    };
    Ok(InstanceDataset {
        manifest: DatasetManifest {
            grid: dims,
            channels,
            count: instances.len(),
            seed,
            family: family.name(),
            skips,
            t_span,
        },
        instances,
    })
}

pub fn generate_instance(
    family: &DatasetFamily,
    index: usize,
    dims: GridDims,
    t_span: f64,
    seed: u64,
) -> Result<Instance> {
    let stream_base = 0x1000 + 4 * index as u64;
    match (family, dims) {
        (DatasetFamily::Transcription { genes }, GridDims::One(n)) => {
            let grid: Vec<f64> = (0..n).map(|j| t_span * j as f64 / n as f64).collect();
            let inst = crate::synth::transcription_instance_streamed(
                seed,
                stream_base,
                *genes,
                &grid,
                t_span / 4.0,
                DATASET_NOISE,
            )?;
            Ok(Instance {
                solution: inst.noisy,
                force: Matrix::from_vec(n, 1, inst.force),
                params: inst.params,
                times: grid,
                space: None,
            })
        }
        (DatasetFamily::ReactionDiffusion { elements }, GridDims::Two(n1, n2)) => {
            if n2 != elements + 1 {
                return Err(Error::DimensionMismatch {
                    expected: (n1, elements + 1),
                    got: (n1, n2),
                });
            }
            let mesh = crate::fem1d::Mesh1D::uniform(*elements, 1.0);
            let exp = crate::synth::reaction_diffusion_experiment_streamed(
                seed,
                stream_base,
                &mesh,
                n1,
                t_span,
                DATASET_NOISE,
            )?;
            let k = mesh.n_vertices();
            Ok(Instance {
                solution: Matrix::from_vec(n1 * k, 1, exp.data.outputs.data().to_vec()),
                force: Matrix::from_vec(n1 * k, 1, exp.force.data().to_vec()),
                params: exp.params,
                times: exp.data.times,
                space: Some(mesh.vertices().to_vec()),
            })
        }
        _ => Err(Error::InvalidArgument {
            what: "dataset family and grid dimensionality do not match",
        }),
    }
}

/// Gaussian negative log likelihood of the targets under the predicted
/// mean/variance, averaged per point, plus the squared-error parameter
/// head loss when present.
fn batch_loss(
    g: &Graph,
    out: &LfoOutput,
    force_targets: &Matrix,
    param_targets: Option<&Matrix>,
) -> Var {
    let target = g.constant(force_targets.clone());
    let resid = &target - &out.mean;
    let quad = &resid.square() / &out.variance.scale(2.0);
    let log_norm = out
        .variance
        .ln()
        .offset((2.0 * core::f64::consts::PI).ln())
        .scale(0.5);
    let nll = (&log_norm + &quad).mean();
    match (param_targets, &out.params) {
        (Some(pt), Some(pred)) => {
            let mse = (&g.constant(pt.clone()) - pred).square().mean();
            &nll + &mse
        }
        _ => nll,
    }
}

/// Per-epoch train/validation loss trace.
#[derive(Clone, Debug, Default)]
pub struct LfoTrace {
    pub rows: Vec<(usize, f64, f64)>,
}

/// Stack a batch of instances into the forward layout.
fn stack_batch(ds: &InstanceDataset, idx: &[usize]) -> (Matrix, Matrix, Matrix) {
    let grid = ds.manifest.grid.total();
    let p = ds.instances[0].solution.cols();
    let l = ds.instances[0].force.cols();
    let np = ds.instances[0].params.len();
    let mut sol = Matrix::zeros(idx.len() * grid, p);
    let mut force = Matrix::zeros(idx.len() * grid, l);
    let mut params = Matrix::zeros(idx.len(), np.max(1));
    for (bi, &i) in idx.iter().enumerate() {
        let inst = &ds.instances[i];
        for j in 0..grid {
            for c in 0..p {
                sol[(bi * grid + j, c)] = inst.solution[(j, c)];
            }
            for c in 0..l {
                force[(bi * grid + j, c)] = inst.force[(j, c)];
            }
        }
        for (c, &v) in inst.params.iter().enumerate() {
            params[(bi, c)] = v;
        }
    }
    (sol, force, params)
}

/// Maximum-likelihood training with a 90/10 train/validation split by
/// index, deterministic minibatch order per `(seed, epoch)`.
pub fn train_lfo(
    net: &mut LfoNet,
    ds: &InstanceDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LfoTrace> {
    if ds.instances.is_empty() {
        return Err(Error::InvalidArgument {
            what: "dataset is empty",
        });
    }
    let dims = ds.manifest.grid;
    let n = ds.instances.len();
    let n_train = ((n as f64) * 0.9).ceil() as usize;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..n).collect();

    // per-channel standardization over the training split
    let (train_sol, _, _) = stack_batch(ds, &train_idx);
    let sample_input = assemble_input(&train_sol, dims);
    let ch = sample_input.cols();
    let rows = sample_input.rows() as f64;
    let mut mean = vec![0.0; ch];
    let mut std = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for r in 0..sample_input.rows() {
            s += sample_input[(r, c)];
        }
        mean[c] = s / rows;
        let mut v = 0.0;
        for r in 0..sample_input.rows() {
            let d = sample_input[(r, c)] - mean[c];
            v += d * d;
        }
        std[c] = (v / rows).sqrt().max(1e-8);
    }
    net.set_normalization(&mean, &std);

    let mut adam = crate::opt::Adam::new(&net.store, lr);
    let mut trace = LfoTrace::default();
    let use_head = net.cfg.n_params > 0;
    for epoch in 0..epochs {
        let mut order = train_idx.clone();
        let mut rng = Rng::stream(seed, 0x600 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut train_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let (sol, force, params) = stack_batch(ds, chunk);
            let input = assemble_input(&sol, dims);
            let g = Graph::new();
            let bound = net.store.bind(&g);
            let out = lfo_forward_batch(&g, net, &bound, &input, chunk.len(), dims)?;
            let loss = batch_loss(&g, &out, &force, use_head.then_some(&params));
            let v = loss.scalar_value();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = g.backward(&loss);
            adam.descend(&mut net.store, &bound, &grads);
            train_loss += v;
            batches += 1.0;
        }
        let val_loss = if val_idx.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            let mut nb = 0.0;
            for chunk in val_idx.chunks(batch_size.max(1)) {
                let (sol, force, params) = stack_batch(ds, chunk);
                let input = assemble_input(&sol, dims);
                let g = Graph::new();
                let bound = net.store.bind(&g);
                let out = lfo_forward_batch(&g, net, &bound, &input, chunk.len(), dims)?;
                total += batch_loss(&g, &out, &force, use_head.then_some(&params)).scalar_value();
                nb += 1.0;
            }
            total / nb
        };
        trace.rows.push((epoch, train_loss / batches, val_loss));
    }
    Ok(trace)
}
