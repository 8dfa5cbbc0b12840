//! Minimal tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! tape once in reverse recording order, so gradient accumulation order is fixed
//! and repeated runs are bit-identical.
//!
//! Op catalog (forward / backward):
//!
//! | op | forward | backward |
//! |----|---------|----------|
//! | `matmul` | `A B` | `G B^T`, `A^T G` |
//! | `spmm` | `A_sparse X` | `A^T G` |
//! | `add` / `sub` / `mul` | elementwise | `G`, `±G`, `G∘B`, `G∘A` |
//! | `scale` | `s X` | `s G` |
//! | `relu` | `max(x, 0)` | `G∘[x > 0]` |
//! | `bias_add` | `X + 1 b` | `G`, column sums of `G` |
//! | `concat_cols` | `[X1 ‖ X2 ‖ …]` per row | column blocks of `G` |
//! | `concat_rows` | stacked rows | row blocks of `G` |
//! | `slice_rows` | contiguous row block | scatter into zeros |
//! | `segment_sum` | per-segment row sums | broadcast back to members |
//! | `l2_normalize_rows` | `x / max(‖x‖, ε)` | `(G - y (y·G)) / ‖x‖` |
//! | `transpose` | `X^T` | `G^T` |
//! | `exp` / `log` | `e^x`, `ln max(x, ε)` | `G∘y`, `G / x` |
//! | `sum_rows` / `mean_rows` | per-row reduction (n×1) | broadcast |
//! | `sum` / `mean` | full reduction (1×1) | broadcast |
//! | `logsumexp_rows` | max-shifted, optionally masked | row softmax ∘ `G` |
//!
//! `ε = 1e-12` throughout.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::sparse::SparseAdjacency;

pub const EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean inclusion mask for masked row reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    /// Square mask excluding the diagonal.
    pub fn off_diagonal(n: usize) -> Self {
        let mut m = Mask::all(n, n);
        for i in 0..n {
            m.keep[i * n + i] = false;
        }
        m
    }

    pub fn exclude(&mut self, r: usize, c: usize) {
        self.keep[r * self.cols + c] = false;
    }

    #[inline]
    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// User-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;
    /// Gradients with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseAdjacency>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BiasAdd(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SegmentSum(Var, Arc<Vec<usize>>),
    L2NormalizeRows(Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    SumRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var, Option<Arc<Mask>>),
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(inputs, op) => write!(f, "Custom({}, {inputs:?})", op.name()),
            Op::Leaf => write!(f, "Leaf"),
            Op::MatMul(a, b) => write!(f, "MatMul({a:?}, {b:?})"),
            Op::SpMM(_, x) => write!(f, "SpMM({x:?})"),
            Op::Add(a, b) => write!(f, "Add({a:?}, {b:?})"),
            Op::Sub(a, b) => write!(f, "Sub({a:?}, {b:?})"),
            Op::Mul(a, b) => write!(f, "Mul({a:?}, {b:?})"),
            Op::Scale(a, s) => write!(f, "Scale({a:?}, {s})"),
            Op::Relu(a) => write!(f, "Relu({a:?})"),
            Op::BiasAdd(a, b) => write!(f, "BiasAdd({a:?}, {b:?})"),
            Op::ConcatCols(v) => write!(f, "ConcatCols({v:?})"),
            Op::ConcatRows(v) => write!(f, "ConcatRows({v:?})"),
            Op::SliceRows(a, s) => write!(f, "SliceRows({a:?}, {s})"),
            Op::SegmentSum(a, _) => write!(f, "SegmentSum({a:?})"),
            Op::L2NormalizeRows(a) => write!(f, "L2NormalizeRows({a:?})"),
            Op::Transpose(a) => write!(f, "Transpose({a:?})"),
            Op::Exp(a) => write!(f, "Exp({a:?})"),
            Op::Log(a) => write!(f, "Log({a:?})"),
            Op::SumRows(a) => write!(f, "SumRows({a:?})"),
            Op::MeanRows(a) => write!(f, "MeanRows({a:?})"),
            Op::Sum(a) => write!(f, "Sum({a:?})"),
            Op::Mean(a) => write!(f, "Mean({a:?})"),
            Op::LogSumExpRows(a, m) => write!(f, "LogSumExpRows({a:?}, masked={})", m.is_some()),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn spmm(&mut self, adj: &Arc<SparseAdjacency>, x: Var) -> Result<Var> {
        let value = adj.matmul(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpMM(Arc::clone(adj), x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Adds the `1 x d` row `bias` to every row of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("bias_add", xv, bv));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd(x, bias), rg))
    }

    /// Per-row concatenation `[x1 || x2 || ...]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::hcat(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks row blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::vcat(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: xv.shape(),
                rhs: (start, len),
            });
        }
        let value = xv.slice_rows(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Sums rows of `x` sharing a segment id; output has `segments` rows.
    pub fn segment_sum(&mut self, x: Var, segment_ids: &Arc<Vec<usize>>, segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segment_ids.len() != xv.rows() {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: xv.shape(),
                rhs: (segment_ids.len(), 1),
            });
        }
        if let Some(&bad) = segment_ids.iter().find(|&&s| s >= segments) {
            return Err(Error::argument(format!("segment id {bad} out of range for {segments} segments")));
        }
        let mut value = Matrix::zeros(segments, xv.cols());
        for (i, &s) in segment_ids.iter().enumerate() {
            for (o, v) in value.row_mut(s).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SegmentSum(x, Arc::clone(segment_ids)), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let n = crate::matrix::norm(xv.row(r)).max(EPS);
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(EPS).ln());
        let rg = self.rg(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(xv.rows(), 1, data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SumRows(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols().max(1) as f64;
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum::<f64>() / d).collect();
        let value = Matrix::from_vec(xv.rows(), 1, data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Matrix::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Row-wise `log Σ_j exp(x_ij)` over the entries kept by `mask`, stabilized by the row max.
    ///
    /// A row with no kept entries is a [`Error::Numerical`].
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = &mask {
            if m.shape() != xv.shape() {
                return Err(Error::Shape {
                    op: "logsumexp_rows",
                    lhs: xv.shape(),
                    rhs: m.shape(),
                });
            }
        }
        let mut data = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let kept = |c: usize| mask.as_ref().map_or(true, |m| m.keeps(r, c));
            let row = xv.row(r);
            let max = (0..row.len())
                .filter(|&c| kept(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Numerical(format!("log-sum-exp over an empty row {r}")));
            }
            let s: f64 = (0..row.len()).filter(|&c| kept(c)).map(|c| (row[c] - max).exp()).sum();
            data.push(max + s.ln());
        }
        let value = Matrix::from_vec(xv.rows(), 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSumExpRows(x, mask), rg))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Result<Var> {
        let mats: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&mats)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Custom(inputs.to_vec(), op), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::argument(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (if matches!(node.op, Op::Leaf) {
                None
            } else {
                grads[idx].take()
            }) else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, contribution: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_t(val(*b)).expect("shape checked in forward"));
                }
                if needs(*b) {
                    acc(*b, val(*a).t_matmul(g).expect("shape checked in forward"));
                }
            }
            Op::SpMM(adj, x) => acc(*x, adj.transpose_matmul(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y).expect("shape"));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y).expect("shape"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape"),
            ),
            Op::BiasAdd(x, b) => {
                acc(*x, g.clone());
                if needs(*b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[col..col + w]);
                        }
                        acc(p, gp);
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if needs(p) {
                        acc(p, g.slice_rows(row, h));
                    }
                    row += h;
                }
            }
            Op::SliceRows(x, start) => {
                let mut gx = Matrix::zeros(val(*x).rows(), g.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::SegmentSum(x, seg) => {
                let mut gx = Matrix::zeros(seg.len(), g.cols());
                for (i, &s) in seg.iter().enumerate() {
                    gx.row_mut(i).copy_from_slice(g.row(s));
                }
                acc(*x, gx);
            }
            Op::L2NormalizeRows(x) => {
                let xv = val(*x);
                let y = &node.value;
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = crate::matrix::norm(xv.row(r));
                    let out = gx.row_mut(r);
                    if n > EPS {
                        let proj = crate::matrix::dot(y.row(r), g.row(r));
                        for ((o, &gv), &yv) in out.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * proj) / n;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(g.row(r)) {
                            *o = gv / EPS;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, "exp", |gv, y| gv * y).expect("shape")),
            Op::Log(x) => acc(
                *x,
                g.zip_map(val(*x), "log", |gv, xv| if xv > EPS { gv / xv } else { 0.0 })
                    .expect("shape"),
            ),
            Op::SumRows(x) | Op::MeanRows(x) => {
                let xv = val(*x);
                let scale = match node.op {
                    Op::MeanRows(_) => 1.0 / xv.cols().max(1) as f64,
                    _ => 1.0,
                };
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.get(r, 0) * scale;
                    gx.row_mut(r).fill(gr);
                }
                acc(*x, gx);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let xv = val(*x);
                let scale = match node.op {
                    Op::Mean(_) => 1.0 / xv.len().max(1) as f64,
                    _ => 1.0,
                };
                acc(*x, Matrix::filled(xv.rows(), xv.cols(), g.item() * scale));
            }
            Op::LogSumExpRows(x, mask) => {
                let xv = val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        if mask.as_ref().map_or(true, |m| m.keeps(r, c)) {
                            *o = gr * (xv.get(r, c) - lse).exp();
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Custom(inputs, op) => {
                let mats: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&mats, &node.value, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    acc(v, gv);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    /// Coordinates sitting on a kink (one-sided slopes disagree at every scale).
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, x: &Matrix) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.shape(y) != (1, 1) {
        return Err(Error::argument("grad_check needs a scalar-valued function"));
    }
    let v = tape.value(y).item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("function value {v} is not finite near x0")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` at `x0` with central finite differences.
pub fn grad_check<F>(f: F, x0: &Matrix, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let y = f(&mut tape, x)?;
    let f0 = tape.value(y).item();
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("function value {f0} is not finite at x0")));
    }
    let analytic = tape.backward(y)?.take(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        excluded: Vec::new(),
        tol,
        passed: true,
    };
    let mut probe = x0.clone();
    let mut at = |k: usize, delta: f64| -> Result<f64> {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + delta;
        let v = eval_scalar(&f, &probe);
        probe.data_mut()[k] = orig;
        v
    };
    for k in 0..x0.len() {
        let (fp, fm) = (at(k, h)?, at(k, -h)?);
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic.data()[k];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        if rel > tol {
            // A kink keeps the one-sided slopes apart as the step shrinks; smooth curvature does not.
            let gap = |step: f64, up: f64, down: f64| ((up - f0) / step - (f0 - down) / step).abs();
            let coarse = gap(h, fp, fm);
            let fine = gap(h / 4.0, at(k, h / 4.0)?, at(k, -h / 4.0)?);
            if coarse > 1e-6 * (1.0 + ad.abs()) && fine > 0.5 * coarse {
                report.excluded.push(k);
                continue;
            }
        }
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(k);
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Random matrix with entries uniform in `(-scale, scale)`, for verification inputs.
pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    use rand::Rng;
    let mut r = rng::stream(seed, rng::GRADCHECK);
    let data = (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![-1.0, 2.0]]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn detached_leaf_gets_zero() {
        let mut t = Tape::new();
        let w = t.param(m(&[vec![1.0, 2.0]]));
        let x = t.param(Matrix::scalar(2.0));
        let y = t.scale(x, 4.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0, 2.0]]));
        assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn catalog_shape_and_value_contracts() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(3, 4));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), (2, 4));
        assert!(matches!(t.matmul(b, b), Err(Error::Shape { lhs: (3, 4), rhs: (3, 4), .. })));

        let rows = t.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let seg = Arc::new(vec![0, 0, 1]);
        let s = t.segment_sum(rows, &seg, 2).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0, 5.0, 6.0]);

        let v = t.constant(m(&[vec![3.0, 4.0]]));
        let n = t.l2_normalize_rows(v);
        assert!(t.value(n).max_abs_diff(&m(&[vec![0.6, 0.8]])) < 1e-15);

        let z = t.constant(m(&[vec![0.0, 0.0]]));
        let l = t.log(z);
        assert!(t.value(l).is_finite());
    }

    #[test]
    fn masked_logsumexp_skips_excluded() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![1.0, 100.0], vec![2.0, 3.0]]));
        let mut mask = Mask::all(2, 2);
        mask.exclude(0, 1);
        let l = t.logsumexp_rows(x, Some(Arc::new(mask))).unwrap();
        assert!((t.value(l).get(0, 0) - 1.0).abs() < 1e-15);
        let s = t.sum(l);
        let g = t.backward(s).unwrap().get(x);
        assert_eq!(g.get(0, 1), 0.0);
        assert!((g.get(0, 0) - 1.0).abs() < 1e-15);

        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(1.0));
        let empty = Mask::off_diagonal(1);
        assert!(matches!(t.logsumexp_rows(x, Some(Arc::new(empty))), Err(Error::Numerical(_))));
    }

    #[test]
    fn quadratic_form_passes_grad_check() {
        let a = random_matrix(4, 4, 1.0, 11);
        let sym = a.zip_map(&a.transpose(), "sym", |x, y| 0.5 * (x + y)).unwrap();
        let x0 = random_matrix(4, 1, 1.0, 12);
        let report = grad_check(
            |t, x| {
                let mm = t.constant(sym.clone());
                let mx = t.matmul(mm, x)?;
                let p = t.mul(x, mx)?;
                Ok(t.sum(p))
            },
            &x0,
            DEFAULT_FD_STEP,
            DEFAULT_FD_TOL,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let x0 = m(&[vec![0.0, 1.5, -2.0]]);
        let report = grad_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x0,
            DEFAULT_FD_STEP,
            DEFAULT_FD_TOL,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.excluded, vec![0]);
        assert_eq!(report.checked, 2);
    }

    struct WrongSquare;
    impl CustomOp for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }
        fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
            Ok(inputs[0].map(|v| v * v))
        }
        fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
            vec![grad.zip_map(inputs[0], "g", |g, x| 3.0 * g * x).unwrap()]
        }
    }

    #[test]
    fn wrong_backward_is_detected() {
        let report = grad_check(
            |t, x| {
                let y = t.custom(&[x], Arc::new(WrongSquare))?;
                Ok(t.sum(y))
            },
            &m(&[vec![0.7, -1.2]]),
            DEFAULT_FD_STEP,
            DEFAULT_FD_TOL,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(random_matrix(5, 3, 1.0, 3));
            let w = t.param(random_matrix(3, 3, 1.0, 4));
            let h = t.matmul(x, w).unwrap();
            let n = t.l2_normalize_rows(h);
            let nt = t.transpose(n);
            let s = t.matmul(n, nt).unwrap();
            let l = t.logsumexp_rows(s, Some(Arc::new(Mask::off_diagonal(5)))).unwrap();
            let loss = t.mean(l);
            let g = t.backward(loss).unwrap();
            (t.value(loss).clone(), g.get(x), g.get(w))
        };
        assert_eq!(run(), run());
    }
}
