//! Recorded-operation reverse-mode differentiation over matrices.
//!
//! A [`Graph`] is a tape of matrix-valued nodes built eagerly by operations
//! on [`Var`] handles. [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients to every parameter node. Dense operations use
//! composition of elementwise/matmul adjoints; the factorizations and
//! band solves register custom adjoint rules.
//!
//! A graph is confined to one thread of execution; the values it stores are
//! immutable once recorded.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tridiag::TriDiag;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    PowI(usize, i32),
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    Reshape(usize),
    DiagPart(usize),
    DiagEmbed(usize),
    SelectRows(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    ShiftCols(usize, isize),
    TransposeWithin(usize, usize),
    Cholesky(usize),
    SolveLowerTri(usize, usize),
    SolveUpperTri(usize, usize),
    SolveTriDiag(usize, usize, usize, usize),
    TriMatVec(usize, usize, usize, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
}

/// Reverse-mode tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

/// Gradients of one scalar node with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or a zero matrix of the node's shape.
    pub fn of(&self, v: &Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.rows() > 0 && value.cols() > 0);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn value_at(&self, id: usize) -> Matrix {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_at(&self, id: usize) -> (usize, usize) {
        self.inner.borrow().nodes[id].value.shape()
    }

    /// Insert a constant (no gradient flows to it).
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Matrix::scalar(x))
    }

    pub fn scalar_param(&self, x: f64) -> Var {
        self.param(Matrix::scalar(x))
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn binary_elementwise(
        &self,
        a: &Var,
        b: &Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        debug_assert!(self.same_graph(&b.graph));
        let (va, vb) = (self.value_at(a.id), self.value_at(b.id));
        let value = broadcast_zip(&va, &vb, f);
        self.push(value, op, self.needs(a.id) || self.needs(b.id))
    }

    fn unary(&self, a: &Var, value: Matrix, op: Op) -> Var {
        self.push(value, op, self.needs(a.id))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div(&self, a: &Var, b: &Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a.id, b.id))
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        debug_assert!(self.same_graph(&b.graph));
        let value = self.value_at(a.id).matmul(&self.value_at(b.id));
        self.push(value, Op::MatMul(a.id, b.id), self.needs(a.id) || self.needs(b.id))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape_at(parts[0].id).1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for p in parts {
            let v = self.value_at(p.id);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
            needs |= self.needs(p.id);
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape_at(parts[0].id).0;
        let values: Vec<Matrix> = parts.iter().map(|p| self.value_at(p.id)).collect();
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for v in &values {
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..v.cols() {
                    out[(i, at + j)] = v[(i, j)];
                }
            }
            at += v.cols();
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Lower Cholesky factor of `a + jitter*I` (with jitter escalation),
    /// differentiable with respect to `a`.
    pub fn cholesky(&self, a: &Var, jitter: f64) -> Result<Var> {
        let l = self.value_at(a.id).cholesky(jitter)?;
        Ok(self.push(l, Op::Cholesky(a.id), self.needs(a.id)))
    }

    /// `L^{-1} B` for lower-triangular `L`.
    pub fn solve_lower(&self, l: &Var, b: &Var) -> Var {
        let x = self.value_at(l.id).solve_lower_triangular(&self.value_at(b.id));
        self.push(
            x,
            Op::SolveLowerTri(l.id, b.id),
            self.needs(l.id) || self.needs(b.id),
        )
    }

    /// `U^{-1} B` for upper-triangular `U`.
    pub fn solve_upper(&self, u: &Var, b: &Var) -> Var {
        let x = self.value_at(u.id).solve_upper_triangular(&self.value_at(b.id));
        self.push(
            x,
            Op::SolveUpperTri(u.id, b.id),
            self.needs(u.id) || self.needs(b.id),
        )
    }

    /// Solve the tridiagonal system assembled from the band vectors against
    /// each column of `rhs`. Registers the discrete-adjoint rule: for
    /// `A y = b`, an incoming gradient `g` yields `b_bar = A^{-T} g` and the
    /// band gradients of `-(A^{-T} g) y^T` restricted to the band pattern.
    pub fn solve_tridiag(&self, lower: &Var, diag: &Var, upper: &Var, rhs: &Var) -> Result<Var> {
        let (l, d, u, b) = (
            self.value_at(lower.id),
            self.value_at(diag.id),
            self.value_at(upper.id),
            self.value_at(rhs.id),
        );
        let bands = TriDiag::new(l.into_data(), d.into_data(), u.into_data());
        let m = b.cols();
        let x = bands.solve_columns(b.data(), m)?;
        let needs = self.needs(lower.id)
            || self.needs(diag.id)
            || self.needs(upper.id)
            || self.needs(rhs.id);
        Ok(self.push(
            Matrix::from_vec(bands.n(), m, x),
            Op::SolveTriDiag(lower.id, diag.id, upper.id, rhs.id),
            needs,
        ))
    }

    /// Multiply the tridiagonal matrix assembled from the bands by each
    /// column of `x`.
    pub fn tri_matvec(&self, lower: &Var, diag: &Var, upper: &Var, x: &Var) -> Var {
        let (l, d, u, xv) = (
            self.value_at(lower.id),
            self.value_at(diag.id),
            self.value_at(upper.id),
            self.value_at(x.id),
        );
        let bands = TriDiag::new(l.into_data(), d.into_data(), u.into_data());
        let n = bands.n();
        let m = xv.cols();
        assert_eq!(xv.rows(), n, "tri_matvec shape mismatch");
        let mut out = Matrix::zeros(n, m);
        let mut col = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                col[i] = xv[(i, j)];
            }
            let y = bands.matvec(&col);
            for i in 0..n {
                out[(i, j)] = y[i];
            }
        }
        let needs = self.needs(lower.id)
            || self.needs(diag.id)
            || self.needs(upper.id)
            || self.needs(x.id);
        self.push(out, Op::TriMatVec(lower.id, diag.id, upper.id, x.id), needs)
    }

    /// Gradients of a 1x1 `loss` node with respect to everything upstream.
    pub fn backward(&self, loss: &Var) -> Gradients {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Matrix>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], id: usize, contribution: Matrix) {
    if !nodes[id].needs_grad {
        return;
    }
    debug_assert_eq!(nodes[id].value.shape(), contribution.shape());
    match &mut grads[id] {
        Some(existing) => {
            let sum = existing.add(&contribution);
            *existing = sum;
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Broadcast-aware elementwise combination; shapes must match or one side
/// must be 1x1.
fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        a.zip(b, f)
    } else if a.shape() == (1, 1) {
        let s = a[(0, 0)];
        b.map(|y| f(s, y))
    } else if b.shape() == (1, 1) {
        let s = b[(0, 0)];
        a.map(|x| f(x, s))
    } else {
        panic!(
            "elementwise shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
}

/// Reduce a gradient to the shape of the (possibly broadcast) operand.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        g
    } else if shape == (1, 1) {
        Matrix::scalar(g.sum())
    } else {
        panic!("cannot reduce {:?} to {:?}", g.shape(), shape);
    }
}

fn broadcast_value(m: &Matrix, shape: (usize, usize)) -> Matrix {
    if m.shape() == shape {
        m.clone()
    } else {
        debug_assert_eq!(m.shape(), (1, 1));
        Matrix::filled(shape.0, shape.1, m[(0, 0)])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of the softplus map, `softplus(softplus_inv(y)) = y` for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires a positive argument");
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g.clone(), nodes[*a].value.shape()));
            accumulate(nodes, grads, *b, reduce_to(g.clone(), nodes[*b].value.shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g.clone(), nodes[*a].value.shape()));
            accumulate(nodes, grads, *b, reduce_to(g.scale(-1.0), nodes[*b].value.shape()));
        }
        Op::Mul(a, b) => {
            let bv = broadcast_value(&nodes[*b].value, g.shape());
            let av = broadcast_value(&nodes[*a].value, g.shape());
            accumulate(nodes, grads, *a, reduce_to(g.hadamard(&bv), nodes[*a].value.shape()));
            accumulate(nodes, grads, *b, reduce_to(g.hadamard(&av), nodes[*b].value.shape()));
        }
        Op::Div(a, b) => {
            let bv = broadcast_value(&nodes[*b].value, g.shape());
            let av = broadcast_value(&nodes[*a].value, g.shape());
            let ga = g.zip(&bv, |gi, bi| gi / bi);
            let gb = g
                .zip(&av, |gi, ai| gi * ai)
                .zip(&bv, |num, bi| -num / (bi * bi));
            accumulate(nodes, grads, *a, reduce_to(ga, nodes[*a].value.shape()));
            accumulate(nodes, grads, *b, reduce_to(gb, nodes[*b].value.shape()));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, g.matmul(&bv.transpose()));
            accumulate(nodes, grads, *b, av.transpose().matmul(g));
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.scale(-1.0)),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::Offset(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Exp(a) => accumulate(nodes, grads, *a, g.hadamard(out)),
        Op::Ln(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip(av, |gi, x| gi / x));
        }
        Op::Sqrt(a) => accumulate(nodes, grads, *a, g.zip(out, |gi, y| gi * 0.5 / y)),
        Op::Sin(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip(av, |gi, x| gi * x.cos()));
        }
        Op::Cos(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip(av, |gi, x| -gi * x.sin()));
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, g.zip(out, |gi, y| gi * (1.0 - y * y))),
        Op::Softplus(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip(av, |gi, x| gi * sigmoid(x)));
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            // subgradient 0 at the kink
            accumulate(
                nodes,
                grads,
                *a,
                g.zip(av, |gi, x| gi * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
            );
        }
        Op::PowI(a, k) => {
            let av = &nodes[*a].value;
            let kf = *k as f64;
            accumulate(nodes, grads, *a, g.zip(av, |gi, x| gi * kf * x.powi(k - 1)));
        }
        Op::Sum(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g[(0, 0)]));
        }
        Op::Mean(a) => {
            let (r, c) = nodes[*a].value.shape();
            let n = (r * c) as f64;
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g[(0, 0)] / n));
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Reshape(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, g.clone().reshaped(r, c));
        }
        Op::DiagPart(a) => {
            let n = nodes[*a].value.rows();
            let mut ga = Matrix::zeros(n, n);
            for i in 0..n {
                ga[(i, i)] = g[(i, 0)];
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::DiagEmbed(a) => {
            let n = nodes[*a].value.rows();
            let mut ga = Matrix::zeros(n, 1);
            for i in 0..n {
                ga[(i, 0)] = g[(i, i)];
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SelectRows(a, idx) => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for (out_r, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    ga[(src, j)] += g[(out_r, j)];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SelectCols(a, idx) => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for (out_c, &src) in idx.iter().enumerate() {
                for i in 0..r {
                    ga[(i, src)] += g[(i, out_c)];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for &p in parts {
                let (r, c) = nodes[p].value.shape();
                if nodes[p].needs_grad {
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            gp[(i, j)] = g[(at + i, j)];
                        }
                    }
                    accumulate(nodes, grads, p, gp);
                }
                at += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for &p in parts {
                let (r, c) = nodes[p].value.shape();
                if nodes[p].needs_grad {
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            gp[(i, j)] = g[(i, at + j)];
                        }
                    }
                    accumulate(nodes, grads, p, gp);
                }
                at += c;
            }
        }
        Op::ShiftCols(a, off) => {
            accumulate(nodes, grads, *a, shift_cols_matrix(g, -off));
        }
        Op::TransposeWithin(a, block_rows) => {
            let b_cols = nodes[*a].value.cols();
            let _ = block_rows;
            accumulate(nodes, grads, *a, transpose_within_matrix(g, b_cols));
        }
        Op::Cholesky(a) => {
            // A = L L^T; incoming g is the gradient with respect to L.
            // A_bar = L^{-T} Phi(L^T g) L^{-1}, Phi = lower triangle with
            // halved diagonal, then symmetrized for full-matrix storage.
            let l = out;
            let mut p = l.transpose().matmul(g);
            let n = p.rows();
            for i in 0..n {
                p[(i, i)] *= 0.5;
                for j in (i + 1)..n {
                    p[(i, j)] = 0.0;
                }
            }
            let lt = l.transpose();
            let w = lt.solve_upper_triangular(&p);
            let z = lt.solve_upper_triangular(&w.transpose()).transpose();
            let sym = z.add(&z.transpose()).scale(0.5);
            accumulate(nodes, grads, *a, sym);
        }
        Op::SolveLowerTri(l, b) => {
            let lv = &nodes[*l].value;
            let x = out;
            let gb = lv.transpose().solve_upper_triangular(g);
            if nodes[*l].needs_grad {
                let gl = gb.matmul(&x.transpose()).scale(-1.0).tril();
                accumulate(nodes, grads, *l, gl);
            }
            accumulate(nodes, grads, *b, gb);
        }
        Op::SolveUpperTri(u, b) => {
            let uv = &nodes[*u].value;
            let x = out;
            let gb = uv.transpose().solve_lower_triangular(g);
            if nodes[*u].needs_grad {
                let gu = gb.matmul(&x.transpose()).scale(-1.0).triu();
                accumulate(nodes, grads, *u, gu);
            }
            accumulate(nodes, grads, *b, gb);
        }
        Op::SolveTriDiag(l, d, u, b) => {
            let bands = TriDiag::new(
                nodes[*l].value.data().to_vec(),
                nodes[*d].value.data().to_vec(),
                nodes[*u].value.data().to_vec(),
            );
            let x = out;
            let n = x.rows();
            let m = x.cols();
            let gb_data = bands
                .transposed()
                .solve_columns(g.data(), m)
                .expect("transposed tridiagonal solve in backward");
            let gb = Matrix::from_vec(n, m, gb_data);
            if nodes[*d].needs_grad {
                let mut gd = Matrix::zeros(n, 1);
                for i in 0..n {
                    for j in 0..m {
                        gd[(i, 0)] -= gb[(i, j)] * x[(i, j)];
                    }
                }
                accumulate(nodes, grads, *d, gd);
            }
            if nodes[*l].needs_grad {
                let mut gl = Matrix::zeros(n - 1, 1);
                for i in 0..n - 1 {
                    for j in 0..m {
                        gl[(i, 0)] -= gb[(i + 1, j)] * x[(i, j)];
                    }
                }
                accumulate(nodes, grads, *l, gl);
            }
            if nodes[*u].needs_grad {
                let mut gu = Matrix::zeros(n - 1, 1);
                for i in 0..n - 1 {
                    for j in 0..m {
                        gu[(i, 0)] -= gb[(i, j)] * x[(i + 1, j)];
                    }
                }
                accumulate(nodes, grads, *u, gu);
            }
            accumulate(nodes, grads, *b, gb);
        }
        Op::TriMatVec(l, d, u, x) => {
            let bands = TriDiag::new(
                nodes[*l].value.data().to_vec(),
                nodes[*d].value.data().to_vec(),
                nodes[*u].value.data().to_vec(),
            );
            let xv = &nodes[*x].value;
            let n = xv.rows();
            let m = xv.cols();
            if nodes[*x].needs_grad {
                let mut gx = Matrix::zeros(n, m);
                let t = bands.transposed();
                let mut col = vec![0.0; n];
                for j in 0..m {
                    for i in 0..n {
                        col[i] = g[(i, j)];
                    }
                    let y = t.matvec(&col);
                    for i in 0..n {
                        gx[(i, j)] = y[i];
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if nodes[*d].needs_grad {
                let mut gd = Matrix::zeros(n, 1);
                for i in 0..n {
                    for j in 0..m {
                        gd[(i, 0)] += g[(i, j)] * xv[(i, j)];
                    }
                }
                accumulate(nodes, grads, *d, gd);
            }
            if nodes[*l].needs_grad {
                let mut gl = Matrix::zeros(n - 1, 1);
                for i in 0..n - 1 {
                    for j in 0..m {
                        gl[(i, 0)] += g[(i + 1, j)] * xv[(i, j)];
                    }
                }
                accumulate(nodes, grads, *l, gl);
            }
            if nodes[*u].needs_grad {
                let mut gu = Matrix::zeros(n - 1, 1);
                for i in 0..n - 1 {
                    for j in 0..m {
                        gu[(i, 0)] += g[(i, j)] * xv[(i + 1, j)];
                    }
                }
                accumulate(nodes, grads, *u, gu);
            }
        }
    }
}

fn shift_cols_matrix(m: &Matrix, off: isize) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let src = j as isize - off;
            if src >= 0 && (src as usize) < c {
                out[(i, j)] = m[(i, src as usize)];
            }
        }
    }
    out
}

fn transpose_within_matrix(m: &Matrix, block_rows: usize) -> Matrix {
    let (total, b) = m.shape();
    assert_eq!(total % block_rows, 0, "transpose_within block mismatch");
    let groups = total / block_rows;
    let mut out = Matrix::zeros(groups * b, block_rows);
    for grp in 0..groups {
        for i in 0..block_rows {
            for j in 0..b {
                out[(grp * b + j, i)] = m[(grp * block_rows + i, j)];
            }
        }
    }
    out
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Matrix {
        self.graph.value_at(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.shape_at(self.id)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "scalar_value on a non-scalar node");
        v[(0, 0)]
    }

    fn unary_map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value().map(f);
        self.graph.unary(self, value, op)
    }

    pub fn neg(&self) -> Var {
        self.unary_map(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary_map(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn offset(&self, c: f64) -> Var {
        self.unary_map(|x| x + c, Op::Offset(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary_map(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary_map(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary_map(|x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn sin(&self) -> Var {
        self.unary_map(|x| x.sin(), Op::Sin(self.id))
    }

    pub fn cos(&self) -> Var {
        self.unary_map(|x| x.cos(), Op::Cos(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.unary_map(|x| x.tanh(), Op::Tanh(self.id))
    }

    pub fn softplus(&self) -> Var {
        self.unary_map(softplus_scalar, Op::Softplus(self.id))
    }

    pub fn abs(&self) -> Var {
        self.unary_map(|x| x.abs(), Op::Abs(self.id))
    }

    pub fn powi(&self, k: i32) -> Var {
        self.unary_map(|x| x.powi(k), Op::PowI(self.id, k))
    }

    pub fn square(&self) -> Var {
        self.powi(2)
    }

    pub fn sum(&self) -> Var {
        let v = Matrix::scalar(self.value().sum());
        self.graph.unary(self, v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let val = self.value();
        let v = Matrix::scalar(val.sum() / val.len() as f64);
        self.graph.unary(self, v, Op::Mean(self.id))
    }

    pub fn t(&self) -> Var {
        let v = self.value().transpose();
        self.graph.unary(self, v, Op::Transpose(self.id))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let v = self.value().reshaped(rows, cols);
        self.graph.unary(self, v, Op::Reshape(self.id))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.graph.matmul(self, other)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag_part(&self) -> Var {
        let v = self.value();
        assert!(v.is_square());
        let d = Matrix::col(&v.diag());
        self.graph.unary(self, d, Op::DiagPart(self.id))
    }

    /// Column vector to diagonal matrix.
    pub fn diag_embed(&self) -> Var {
        let v = self.value();
        assert_eq!(v.cols(), 1);
        let n = v.rows();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = v[(i, 0)];
        }
        self.graph.unary(self, m, Op::DiagEmbed(self.id))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Var {
        let v = self.value();
        let mut out = Matrix::zeros(idx.len(), v.cols());
        for (r, &src) in idx.iter().enumerate() {
            assert!(src < v.rows(), "row index out of range");
            for j in 0..v.cols() {
                out[(r, j)] = v[(src, j)];
            }
        }
        self.graph
            .unary(self, out, Op::SelectRows(self.id, idx.to_vec()))
    }

    pub fn select_cols(&self, idx: &[usize]) -> Var {
        let v = self.value();
        let mut out = Matrix::zeros(v.rows(), idx.len());
        for (c, &src) in idx.iter().enumerate() {
            assert!(src < v.cols(), "column index out of range");
            for i in 0..v.rows() {
                out[(i, c)] = v[(i, src)];
            }
        }
        self.graph
            .unary(self, out, Op::SelectCols(self.id, idx.to_vec()))
    }

    /// Shift columns by `off` (positive moves content right), zero-filling.
    pub fn shift_cols(&self, off: isize) -> Var {
        let v = shift_cols_matrix(&self.value(), off);
        self.graph.unary(self, v, Op::ShiftCols(self.id, off))
    }

    /// Treat the matrix as stacked `block_rows x cols` blocks and transpose
    /// each block in place.
    pub fn transpose_within(&self, block_rows: usize) -> Var {
        let v = transpose_within_matrix(&self.value(), block_rows);
        self.graph
            .unary(self, v, Op::TransposeWithin(self.id, block_rows))
    }
}

impl core::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        self.graph.add(self, rhs)
    }
}

impl core::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        self.graph.sub(self, rhs)
    }
}

impl core::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        self.graph.mul(self, rhs)
    }
}

impl core::ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        self.graph.div(self, rhs)
    }
}

impl core::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
