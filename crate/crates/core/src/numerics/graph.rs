//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and [`Graph::backward`] simply walks the tape in reverse.

use std::ops::Range;

use super::activation::Activation;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(BinaryKind, Var, Var, Bcast),
    Unary(Activation, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sin(Var),
    Ln(Var),
    Square(Var),
    SumAll(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    DepthwiseConv { x: Var, kernels: Var, segments: Vec<Range<usize>> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    NormalizeColumns { x: Var, inv_std: Vec<f64> },
    ColumnAffine { x: Var, scale: Vec<f64> },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Binary(BinaryKind::Div, ..) => "div",
            Op::Unary(Activation::Sigmoid, _) => "sigmoid",
            Op::Unary(Activation::Softplus, _) => "softplus",
            Op::Unary(Activation::Exp, _) => "exp",
            Op::Unary(Activation::Rectifier, _) => "rectifier",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Sin(_) => "sin",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::SumAll(_) => "sum_all",
            Op::SumRows(_) => "sum_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::NormalizeColumns { .. } => "normalize_columns",
            Op::ColumnAffine { .. } => "column_affine",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by `matmul` nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros when the node was unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: self.nodes.len() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a value computed by an external kernel together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom(op, inputs.to_vec()), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.macs += (m * k * self.value(b).cols()) as u64;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    fn bcast_kind(l: &Tensor, r: &Tensor) -> Result<Bcast> {
        let (lr, lc) = (l.rows(), l.cols());
        let (rr, rc) = (r.rows(), r.cols());
        if r.len() == 1 && l.len() != 1 {
            Ok(Bcast::Scalar)
        } else if (rr, rc) == (lr, lc) {
            Ok(Bcast::Same)
        } else if rr == 1 && rc == lc {
            Ok(Bcast::Row)
        } else if rc == 1 && rr == lr {
            Ok(Bcast::Col)
        } else {
            Err(Error::Dimension(format!(
                "cannot broadcast {:?} onto {:?}",
                r.shape(),
                l.shape()
            )))
        }
    }

    fn rhs_index(kind: Bcast, i: usize, j: usize, cols: usize) -> usize {
        match kind {
            Bcast::Same => i * cols + j,
            Bcast::Scalar => 0,
            Bcast::Row => j,
            Bcast::Col => i,
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (l, r) = (self.value(a), self.value(b));
        let bc = Self::bcast_kind(l, r)?;
        let cols = l.cols();
        let rd = r.data();
        let mut out = l.clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            let y = rd[Self::rhs_index(bc, idx / cols, idx % cols, cols)];
            *o = match kind {
                BinaryKind::Add => *o + y,
                BinaryKind::Sub => *o - y,
                BinaryKind::Mul => *o * y,
                BinaryKind::Div => *o / y,
            };
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Binary(kind, a, b, bc), rg)
    }

    /// `a + b`, where `b` may be a scalar, a row vector, or a column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let out = self.value(a).map(|x| kind.apply(x));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Rectifier)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sin(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let out = Tensor::matrix(1, c, out)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::Dimension(format!("concat_rows column mismatch {} vs {c}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if rows.end > t.rows() || rows.start > rows.end {
            return Err(Error::Dimension(format!("row slice {rows:?} out of {} rows", t.rows())));
        }
        let c = t.cols();
        let out = Tensor::matrix(rows.len(), c, t.data()[rows.start * c..rows.end * c].to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SliceRows(a, rows.start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        if cols.end > t.cols() || cols.start > cols.end {
            return Err(Error::Dimension(format!("column slice {cols:?} out of {} columns", t.cols())));
        }
        let r = t.rows();
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[cols.clone()]);
        }
        let out = Tensor::matrix(r, cols.len(), data)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SliceCols(a, cols.start), rg)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len() * times);
        for i in 0..t.rows() {
            for _ in 0..times {
                data.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::matrix(t.rows() * times, c, data)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::RepeatRows(a, times), rg)
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= t.rows() {
                return Err(Error::Dimension(format!("gather index {i} out of {} rows", t.rows())));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::GatherRows(a, index.to_vec()), rg)
    }

    /// Depthwise 1-D convolution along rows with zero padding.
    ///
    /// `x` is `[R, D]`, `kernels` is `[D, C, k]` with odd `k`; the result is
    /// `[R, D*C]`. Each row range in `segments` is an independent sequence, so
    /// padding applies at every segment boundary.
    pub fn depthwise_conv1d(&mut self, x: Var, kernels: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (xt, kt) = (self.value(x), self.value(kernels));
        let ks = kt.shape();
        if ks.len() != 3 {
            return Err(Error::Dimension(format!("kernels must be [D, C, k], got {ks:?}")));
        }
        let (d, c, k) = (ks[0], ks[1], ks[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if xt.cols() != d {
            return Err(Error::Dimension(format!("input has {} variates, kernels expect {d}", xt.cols())));
        }
        check_segments(segments, xt.rows())?;
        let r = (k - 1) / 2;
        let (xd, kd) = (xt.data(), kt.data());
        let mut out = vec![0.0; xt.rows() * d * c];
        for seg in segments {
            for row in seg.clone() {
                for j in 0..k {
                    let src = row as isize + j as isize - r as isize;
                    if src < seg.start as isize || src >= seg.end as isize {
                        continue;
                    }
                    let src = src as usize;
                    for v in 0..d {
                        let xv = xd[src * d + v];
                        if xv == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            out[row * d * c + v * c + ch] += kd[(v * c + ch) * k + j] * xv;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(xt.rows(), d * c, out)?;
        let rg = self.any_grad(&[x, kernels]);
        self.push(out, Op::DepthwiseConv { x, kernels, segments: segments.to_vec() }, rg)
    }

    /// Non-overlapping max pooling of `stride` consecutive rows within each
    /// segment; trailing rows that do not fill a window are dropped. Returns
    /// the pooled node and its segment layout.
    pub fn max_pool_rows(
        &mut self,
        x: Var,
        stride: usize,
        segments: &[Range<usize>],
    ) -> Result<(Var, Vec<Range<usize>>)> {
        let t = self.value(x);
        check_segments(segments, t.rows())?;
        if stride == 0 {
            return Err(Error::Config("pooling stride must be positive".into()));
        }
        let c = t.cols();
        let mut data = Vec::new();
        let mut argmax = Vec::new();
        let mut out_segments = Vec::with_capacity(segments.len());
        let mut out_rows = 0;
        for seg in segments {
            let n_out = seg.len() / stride;
            out_segments.push(out_rows..out_rows + n_out);
            out_rows += n_out;
            for u in 0..n_out {
                let base = seg.start + u * stride;
                for col in 0..c {
                    let mut best = base;
                    for row in base + 1..base + stride {
                        if t.data()[row * c + col] > t.data()[best * c + col] {
                            best = row;
                        }
                    }
                    data.push(t.data()[best * c + col]);
                    argmax.push(best * c + col);
                }
            }
        }
        let out = Tensor::matrix(out_rows, c, data)?;
        let rg = self.any_grad(&[x]);
        let v = self.push(out, Op::MaxPoolRows { x, argmax }, rg)?;
        Ok((v, out_segments))
    }

    /// Per-column standardization over all rows (the train-mode core of batch
    /// normalization). Returns the node plus the batch mean and biased variance.
    pub fn normalize_columns(&mut self, x: Var, epsilon: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(Error::Dimension("cannot normalize an empty batch".into()));
        }
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * s;
            }
        }
        let rg = self.any_grad(&[x]);
        let v = self.push(out, Op::NormalizeColumns { x, inv_std }, rg)?;
        Ok((v, mean, var))
    }

    /// `y[:, c] = x[:, c] * scale[c] + shift[c]` with constant coefficients.
    pub fn column_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Dimension("column affine coefficient length mismatch".into()));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, a), b) in row.iter_mut().zip(scale).zip(shift) {
                *o = *o * a + b;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::ColumnAffine { x, scale: scale.to_vec() }, rg)
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            grads[i] = Some(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if !cg.is_finite() {
                    return Err(Error::NonFinite { op: self.nodes[i].op.name(), node: i });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut res = vec![];
                if self.requires_grad(*a) {
                    let ga = g.matmul(&bv.transpose())?.reshape(av.shape())?;
                    res.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose().matmul(g)?.reshape(bv.shape())?;
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, g.transpose().reshape(val(*a).shape())?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Binary(kind, a, b, bc) => {
                let (l, r) = (val(*a), val(*b));
                let cols = l.cols();
                let (ld, rd, gd) = (l.data(), r.data(), g.data());
                let mut gl = vec![0.0; l.len()];
                let mut gr = vec![0.0; r.len()];
                for idx in 0..l.len() {
                    let ri = Self::rhs_index(*bc, idx / cols, idx % cols, cols);
                    let (x, z, gg) = (ld[idx], rd[ri], gd[idx]);
                    let (dl, dr) = match kind {
                        BinaryKind::Add => (gg, gg),
                        BinaryKind::Sub => (gg, -gg),
                        BinaryKind::Mul => (gg * z, gg * x),
                        BinaryKind::Div => (gg / z, -gg * x / (z * z)),
                    };
                    gl[idx] = dl;
                    gr[ri] += dr;
                }
                vec![
                    (*a, Tensor::new(l.shape().to_vec(), gl)?),
                    (*b, Tensor::new(r.shape().to_vec(), gr)?),
                ]
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::Sin(a) => vec![(*a, val(*a).zip_map(g, |x, gi| gi * x.cos())?)],
            Op::Ln(a) => vec![(*a, val(*a).zip_map(g, |x, gi| gi / x)?)],
            Op::Square(a) => vec![(*a, val(*a).zip_map(g, |x, gi| 2.0 * x * gi)?)],
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumRows(a) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    d.extend_from_slice(&g.data()[..c]);
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::ConcatRows(parts) => {
                let mut res = vec![];
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let part = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    res.push((p, part));
                }
                res
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut res = vec![];
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut d = Vec::with_capacity(val(p).len());
                    for row in g.data().chunks(total) {
                        d.extend_from_slice(&row[offset..offset + pc]);
                    }
                    offset += pc;
                    res.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                }
                res
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let (c, gc) = (x.cols(), g.cols());
                let mut d = vec![0.0; x.len()];
                for (i, row) in g.data().chunks(gc).enumerate() {
                    d[i * c + start..i * c + start + gc].copy_from_slice(row);
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::RepeatRows(a, times) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (i, row) in g.data().chunks(c).enumerate() {
                    let src = i / times;
                    for (o, v) in d[src * c..(src + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::GatherRows(a, index) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (row, &src) in g.data().chunks(c).zip(index) {
                    for (o, v) in d[src * c..(src + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::DepthwiseConv { x, kernels, segments } => {
                let (xt, kt) = (val(*x), val(*kernels));
                let ks = kt.shape();
                let (d, c, k) = (ks[0], ks[1], ks[2]);
                let r = (k - 1) / 2;
                let (xd, kd, gd) = (xt.data(), kt.data(), g.data());
                let mut gx = vec![0.0; xt.len()];
                let mut gk = vec![0.0; kt.len()];
                for seg in segments {
                    for row in seg.clone() {
                        for j in 0..k {
                            let src = row as isize + j as isize - r as isize;
                            if src < seg.start as isize || src >= seg.end as isize {
                                continue;
                            }
                            let src = src as usize;
                            for v in 0..d {
                                for ch in 0..c {
                                    let go = gd[row * d * c + v * c + ch];
                                    gk[(v * c + ch) * k + j] += go * xd[src * d + v];
                                    gx[src * d + v] += go * kd[(v * c + ch) * k + j];
                                }
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xt.shape().to_vec(), gx)?),
                    (*kernels, Tensor::new(kt.shape().to_vec(), gk)?),
                ]
            }
            Op::MaxPoolRows { x, argmax } => {
                let xt = val(*x);
                let mut d = vec![0.0; xt.len()];
                for (&src, gi) in argmax.iter().zip(g.data()) {
                    d[src] += gi;
                }
                vec![(*x, Tensor::new(xt.shape().to_vec(), d)?)]
            }
            Op::NormalizeColumns { x, inv_std } => {
                let xt = val(*x);
                let (r, c) = (xt.rows(), xt.cols());
                let n = r as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, yrow) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * yrow[j];
                    }
                }
                let mut d = vec![0.0; xt.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                    for j in 0..c {
                        drow[j] = inv_std[j] / n * (n * grow[j] - sum_g[j] - yrow[j] * sum_gx[j]);
                    }
                }
                vec![(*x, Tensor::new(xt.shape().to_vec(), d)?)]
            }
            Op::ColumnAffine { x, scale } => {
                let c = scale.len();
                let mut d = g.clone();
                for row in d.data_mut().chunks_mut(c) {
                    for (o, s) in row.iter_mut().zip(scale) {
                        *o *= s;
                    }
                }
                vec![(*x, d.reshape(val(*x).shape())?)]
            }
            Op::Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&tensors, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Dimension(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, gv)| gv.map(|t| (v, t)))
                    .collect()
            }
        };
        Ok(out)
    }
}

fn check_segments(segments: &[Range<usize>], rows: usize) -> Result<()> {
    let mut prev = 0;
    for s in segments {
        if s.start < prev || s.end < s.start || s.end > rows {
            return Err(Error::Dimension(format!("invalid segment {s:?} for {rows} rows")));
        }
        prev = s.end;
    }
    Ok(())
}
