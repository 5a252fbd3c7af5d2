//! Reverse-mode tape over dense matrices.
//!
//! Every node holds a matrix value; scalars are `1 x 1`. Parameters are
//! views into one flat vector addressed by offset, so the gradient comes back
//! in exactly the layout the optimizer updates. A tape is built for one batch,
//! swept backward once and dropped.
//!
//! Besides the elementwise and product primitives there are three fused
//! "jet" operations used by the surrogate network. A jet is a row-stacked
//! matrix of channels `[value; ∂₁; …; ∂_d; Δ]`, each block `n x width`, so a
//! single product carries the value, the input gradient and the Laplacian of
//! every hidden unit through a layer. Reverse sweeps through these blocks give
//! parameter gradients of second-order residuals, and gradients with respect
//! to the input points when those are tape inputs.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::linalg::Mat;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param { offset: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleCols(Var, Vec<f64>),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LogCosh(Var),
    Sum(Var),
    RowSum(Var),
    SelectCols(Var, Vec<usize>),
    AssembleCols(Vec<(Var, Vec<usize>)>),
    JetInput(Var),
    JetTanh { input: Var, weight: Var, bias: Var, channels: usize },
    JetAffine { input: Var, weight: Var, bias: Var, channels: usize },
    Block { input: Var, index: usize, channels: usize },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    /// Cached pre-activation for fused jet layers.
    aux: Option<Mat>,
}

/// Append-only record of matrix operations. Nodes are pushed after their
/// inputs, so indices are a topological order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    /// `∂loss/∂θ` in flat parameter layout; unreachable parameters are 0.
    pub params: Vec<f64>,
    inputs: HashMap<Var, Mat>,
}

impl Gradients {
    /// Adjoint of a node created with [`Tape::input`]. `None` if the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v)
    }
}

impl Tape {
    /// A tape whose parameter nodes address a flat vector of length `param_len`.
    pub fn new(param_len: usize) -> Self {
        Tape { nodes: Vec::new(), param_len }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op, aux: None });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// A differentiable leaf whose adjoint is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// A `rows x cols` parameter block starting at `offset` of `params`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let end = offset + rows * cols;
        assert!(end <= self.param_len && end <= params.len(), "parameter block out of range");
        self.push(Mat::from_vec(rows, cols, params[offset..end].to_vec()), Op::Param { offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut v = self.value(a).clone();
        let rs = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&rs) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i]`; `col` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.shape(), (self.shape(a).0, 1), "mul_col expects an n x 1 column");
        let c = c.as_slice().to_vec();
        let mut v = self.value(a).clone();
        for (i, ci) in c.iter().enumerate() {
            v.row_mut(i).iter_mut().for_each(|x| *x *= ci);
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// Multiplies column `j` by `k[j]`.
    pub fn scale_cols(&mut self, a: Var, k: &[f64]) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), k.len(), "scale_cols length mismatch");
        for i in 0..v.rows() {
            for (x, kj) in v.row_mut(i).iter_mut().zip(k) {
                *x *= kj;
            }
        }
        self.push(v, Op::ScaleCols(a, k.to_vec()))
    }

    /// Adds `c[j]` to column `j`. Gradient passes through unchanged.
    pub fn offset_cols(&mut self, a: Var, c: &[f64]) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), c.len(), "offset_cols length mismatch");
        for i in 0..v.rows() {
            for (x, cj) in v.row_mut(i).iter_mut().zip(c) {
                *x += cj;
            }
        }
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// `log cosh(a)`, evaluated without overflow for large `|a|`.
    pub fn log_cosh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_cosh);
        self.push(v, Op::LogCosh(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        self.push(v, Op::RowSum(a))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        self.push(v, Op::SelectCols(a, idx.to_vec()))
    }

    /// Builds an `n x cols` matrix where column `dest[j]` of the output is
    /// column `j` of the corresponding part. Every output column must be
    /// written exactly once.
    pub fn assemble_cols(&mut self, cols: usize, parts: &[(Var, &[usize])]) -> Var {
        let n = parts.first().map_or(0, |(v, _)| self.shape(*v).0);
        let mut out = Mat::zeros(n, cols);
        let mut seen = vec![false; cols];
        for (v, dest) in parts {
            let src = self.value(*v);
            assert_eq!(src.shape(), (n, dest.len()), "assemble_cols part shape mismatch");
            for (j, &d) in dest.iter().enumerate() {
                assert!(!seen[d], "assemble_cols writes column {d} twice");
                seen[d] = true;
                for i in 0..n {
                    out.set(i, d, src.get(i, j));
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "assemble_cols leaves a column unset");
        let parts = parts.iter().map(|(v, d)| (*v, d.to_vec())).collect();
        self.push(out, Op::AssembleCols(parts))
    }

    /// Seeds a jet from `n x d` points. With `derivs`, the stack is
    /// `[x; e₁; …; e_d; 0]`, otherwise just `[x]`.
    pub fn jet_input(&mut self, x: Var, derivs: bool) -> Var {
        let v = jet_seed(self.value(x), derivs);
        self.push(v, Op::JetInput(x))
    }

    /// One `tanh` layer applied to a jet with `channels` blocks.
    pub fn jet_tanh(&mut self, input: Var, weight: Var, bias: Var, channels: usize) -> Var {
        let (out, z) = jet_tanh_forward(self.value(input), self.value(weight), self.value(bias), channels);
        let v = self.push(out, Op::JetTanh { input, weight, bias, channels });
        self.nodes[v.0].aux = Some(z);
        v
    }

    /// Linear layer applied to a jet; the bias enters the value block only.
    pub fn jet_affine(&mut self, input: Var, weight: Var, bias: Var, channels: usize) -> Var {
        let out = jet_affine_forward(self.value(input), self.value(weight), self.value(bias), channels);
        self.push(out, Op::JetAffine { input, weight, bias, channels })
    }

    /// Block `index` of a jet with `channels` blocks.
    pub fn block(&mut self, input: Var, index: usize, channels: usize) -> Var {
        let src = self.value(input);
        let n = src.rows() / channels;
        let v = src.row_block(index * n, (index + 1) * n);
        self.push(v, Op::Block { input, index, channels })
    }

    /// `∂loss/∂θ` for every registered parameter.
    pub fn grad_params(&self, loss: Var) -> Result<Vec<f64>> {
        Ok(self.backward(loss)?.params)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar loss node, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(1.0));
        let mut params = vec![0.0; self.param_len];
        let mut inputs = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    inputs.insert(Var(idx), g);
                }
                Op::Param { offset } => {
                    for (p, gv) in params[*offset..*offset + g.len()].iter_mut().zip(g.as_slice()) {
                        *p += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut adj, *r, g.col_sums());
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MulCol(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c);
                    let mut da = g.clone();
                    let mut dc = Vec::with_capacity(cv.rows());
                    for i in 0..g.rows() {
                        let ci = cv.get(i, 0);
                        da.row_mut(i).iter_mut().for_each(|x| *x *= ci);
                        dc.push(g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum());
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *c, Mat::column(dc));
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.map(|x| k * x)),
                Op::Offset(a) => accumulate(&mut adj, *a, g),
                Op::ScaleCols(a, k) => {
                    let mut da = g;
                    for i in 0..da.rows() {
                        for (x, kj) in da.row_mut(i).iter_mut().zip(k) {
                            *x *= kj;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Relu(a) => {
                    accumulate(&mut adj, *a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
                }
                Op::Exp(a) => accumulate(&mut adj, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => accumulate(&mut adj, *a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Square(a) => accumulate(&mut adj, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
                Op::LogCosh(a) => accumulate(&mut adj, *a, g.zip_map(self.value(*a), |x, y| x * y.tanh())),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Mat::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Mat::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::SelectCols(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut da = Mat::zeros(r, c);
                    for i in 0..r {
                        for (j, &col) in idx.iter().enumerate() {
                            let v = da.get(i, col) + g.get(i, j);
                            da.set(i, col, v);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::AssembleCols(parts) => {
                    for (v, dest) in parts {
                        accumulate(&mut adj, *v, g.select_cols(dest));
                    }
                }
                Op::JetInput(x) => {
                    let n = self.shape(*x).0;
                    accumulate(&mut adj, *x, g.row_block(0, n));
                }
                Op::JetTanh { input, weight, bias, channels } => {
                    let z = node.aux.as_ref().expect("jet layer caches its pre-activation");
                    let dz = jet_tanh_backward(&node.value, z, &g, *channels);
                    self.jet_linear_backward(&mut adj, &dz, *input, *weight, *bias, *channels);
                }
                Op::JetAffine { input, weight, bias, channels } => {
                    self.jet_linear_backward(&mut adj, &g, *input, *weight, *bias, *channels);
                }
                Op::Block { input, index, channels } => {
                    let (r, c) = self.shape(*input);
                    let n = r / channels;
                    let mut da = Mat::zeros(r, c);
                    da.as_mut_slice()[index * n * c..(index + 1) * n * c].copy_from_slice(g.as_slice());
                    accumulate(&mut adj, *input, da);
                }
            }
        }
        Ok(Gradients { params, inputs })
    }

    fn jet_linear_backward(&self, adj: &mut [Option<Mat>], dz: &Mat, input: Var, weight: Var, bias: Var, channels: usize) {
        let s = self.value(input);
        let w = self.value(weight);
        let n = dz.rows() / channels;
        let db = dz.row_block(0, n).col_sums();
        accumulate(adj, bias, db);
        accumulate(adj, weight, s.matmul_tn(dz));
        if self.needs_grad(input) {
            accumulate(adj, input, dz.matmul_nt(w));
        }
    }

    /// Jet inputs that are plain constants never need an adjoint.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub(crate) fn jet_seed(x: &Mat, derivs: bool) -> Mat {
    if !derivs {
        return x.clone();
    }
    let (n, d) = x.shape();
    let mut v = Mat::zeros((d + 2) * n, d);
    v.as_mut_slice()[..n * d].copy_from_slice(x.as_slice());
    for i in 0..d {
        for r in 0..n {
            v.set((1 + i) * n + r, i, 1.0);
        }
    }
    v
}

fn add_bias_to_value_block(z: &mut Mat, b: &Mat, channels: usize) {
    let n = z.rows() / channels;
    let bs = b.as_slice();
    assert_eq!(bs.len(), z.cols(), "bias width mismatch");
    for r in 0..n {
        for (x, bj) in z.row_mut(r).iter_mut().zip(bs) {
            *x += bj;
        }
    }
}

pub(crate) fn jet_affine_forward(s: &Mat, w: &Mat, b: &Mat, channels: usize) -> Mat {
    let mut z = s.matmul(w);
    add_bias_to_value_block(&mut z, b, channels);
    z
}

/// Returns `(output, pre-activation)`.
pub(crate) fn jet_tanh_forward(s: &Mat, w: &Mat, b: &Mat, channels: usize) -> (Mat, Mat) {
    let z = jet_affine_forward(s, w, b, channels);
    let m = z.cols();
    let n = z.rows() / channels;
    let zs = z.as_slice();
    let mut out = Mat::zeros(z.rows(), m);
    let o = out.as_mut_slice();
    if channels == 1 {
        for (oi, zi) in o.iter_mut().zip(zs) {
            *oi = zi.tanh();
        }
        return (out, z);
    }
    let lap = channels - 1;
    let block = n * m;
    for e in 0..block {
        let t = zs[e].tanh();
        let p = 1.0 - t * t;
        let q = -2.0 * t * p;
        o[e] = t;
        let mut sumsq = 0.0;
        for c in 1..lap {
            let zc = zs[c * block + e];
            sumsq += zc * zc;
            o[c * block + e] = p * zc;
        }
        o[lap * block + e] = p * zs[lap * block + e] + q * sumsq;
    }
    (out, z)
}

/// Adjoint of the pre-activation given the output adjoint `g`.
pub(crate) fn jet_tanh_backward(out: &Mat, z: &Mat, g: &Mat, channels: usize) -> Mat {
    let n = z.rows() / channels;
    let m = z.cols();
    let block = n * m;
    let (os, zs, gs) = (out.as_slice(), z.as_slice(), g.as_slice());
    let mut dz = Mat::zeros(z.rows(), m);
    let d = dz.as_mut_slice();
    if channels == 1 {
        for e in 0..block {
            d[e] = gs[e] * (1.0 - os[e] * os[e]);
        }
        return dz;
    }
    let lap = channels - 1;
    for e in 0..block {
        let t = os[e];
        let p = 1.0 - t * t;
        let q = -2.0 * t * p;
        let gl = gs[lap * block + e];
        let zl = zs[lap * block + e];
        let mut sumsq = 0.0;
        let mut dp = gl * zl;
        for c in 1..lap {
            let zc = zs[c * block + e];
            let gc = gs[c * block + e];
            sumsq += zc * zc;
            dp += gc * zc;
            d[c * block + e] = gc * p + 2.0 * gl * q * zc;
        }
        d[lap * block + e] = gl * p;
        let dq = gl * sumsq;
        let dp_total = dp - 2.0 * t * dq;
        let dt = gs[e] - 2.0 * p * dq - 2.0 * t * dp_total;
        d[e] = dt * p;
    }
    dz
}
