//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose inputs
//! already exist, so node order is a topological order and the backward pass
//! is a single reverse sweep. Graphs are cheap to build and are rebuilt for
//! every optimisation step; parameters enter as shared `Arc` constants so
//! model weights are never copied onto the tape.
//!
//! All tensors handled here are rank 2 (`[rows, cols]`) except history
//! leaves, which are rank 3 `[heads, time, head_dim]` and are split with
//! [`Graph::select_head`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_slice, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_slice, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied inside [`Graph::log`].
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Embed { table: Var, ids: Vec<usize> },
    SelectHead { x: Var, head: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    SumIndices { x: Var, ids: Vec<usize> },
    Pick { x: Var, index: usize },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Embed { .. } => "embed_lookup",
            Op::SelectHead { .. } => "select_head",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::SumIndices { .. } => "sum_indices",
            Op::Pick { .. } => "pick",
        }
    }
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.shared_leaf(value, false)
    }

    pub fn shared_leaf(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt: [{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).len() != n {
            return Err(Error::Dimension(format!("add_row: row of {} values for {n} columns", self.value(row).len())));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_value);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension(format!("layer_norm: gain/bias must have {n} values")));
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let nf = S::lit(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = vec![S::zero(); t.len()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_slice(src, dst);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), &[x])
    }

    /// Row-wise softmax of `[q, k]` scores where row `i` may only attend to
    /// columns `0..=i + (k - q)`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (q, k) = self.dims2(x)?;
        if q > k {
            return Err(Error::Dimension(format!("causal_softmax: {q} queries over {k} keys")));
        }
        let offset = k - q;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); q * k];
        for i in 0..q {
            let visible = i + offset + 1;
            softmax_slice(&data[i * k..i * k + visible], &mut out[i * k..i * k + visible]);
        }
        self.push(Tensor::new(vec![q, k], out)?, Op::CausalSoftmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = vec![S::zero(); t.len()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_slice(src, dst);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), &[x])
    }

    /// Natural log with the input clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = S::lit(LOG_CLAMP);
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log(x), &[x])
    }

    /// Gathers rows of `table: [V, d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Contract("embed_lookup needs at least one id".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(t.row_slice(id));
        }
        self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embed { table, ids: ids.to_vec() }, &[table])
    }

    /// Slice `head` of a `[heads, t, d]` tensor as a `[t, d]` matrix.
    pub fn select_head(&mut self, x: Var, head: usize) -> Result<Var> {
        let (h, t, d) = match self.value(x).shape() {
            [h, t, d] => (*h, *t, *d),
            other => return Err(Error::Dimension(format!("select_head expects rank 3, got {other:?}"))),
        };
        if head >= h {
            return Err(Error::Index(format!("head {head} of {h}")));
        }
        let data = self.value(x).data()[head * t * d..(head + 1) * t * d].to_vec();
        self.push(Tensor::new(vec![t, d], data)?, Op::SelectHead { x, head }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::Index(format!("column range {start}..{end} of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(Tensor::new(vec![m, end - start], out)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::Dimension(format!("concat_rows: {c} columns, expected {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} rows, expected {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column means of `[m, n]`, as a `[1, n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let inv = S::one() / S::lit(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), &[x])
    }

    /// Sum of the flat entries at `ids`.
    pub fn sum_indices(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let mut s = S::zero();
        for &i in ids {
            s += *src.get(i).ok_or_else(|| Error::Index(format!("index {i} of {}", src.len())))?;
        }
        self.push(Tensor::scalar(s), Op::SumIndices { x, ids: ids.to_vec() }, &[x])
    }

    /// Flat entry `index` as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let src = self.value(x).data();
        let v = *src.get(index).ok_or_else(|| Error::Index(format!("index {index} of {}", src.len())))?;
        self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x])
    }

    /// Backpropagates from the scalar `loss`. Afterwards every leaf created
    /// with `requires_grad` holds `∂loss/∂leaf` (zeros when unreachable).
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(idx, &gout, &mut grads)?;
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![S::zero(); node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad matches value shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                if let Some(ga) = self.slot(*a, grads) {
                    matmul_nt_acc(gout, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    matmul_tn_acc(self.value(*a).data(), gout, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.0;
                if let Some(ga) = self.slot(*a, grads) {
                    matmul_acc(gout, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    matmul_tn_acc(gout, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(*v, grads) {
                        acc(g, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.slot(*a, grads) {
                    acc(g, gout);
                }
                if let Some(g) = self.slot(*b, grads) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(*a, grads) {
                    g.iter_mut().zip(gout).zip(bv).for_each(|((g, &d), &y)| *g += d * y);
                }
                if let Some(g) = self.slot(*b, grads) {
                    g.iter_mut().zip(gout).zip(av).for_each(|((g, &d), &x)| *g += d * x);
                }
            }
            Op::AddRow(a, row) => {
                let n = self.dims2(*a)?.1;
                if let Some(g) = self.slot(*a, grads) {
                    acc(g, gout);
                }
                if let Some(g) = self.slot(*row, grads) {
                    for chunk in gout.chunks(n) {
                        acc(g, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.slot(*a, grads) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d * *c);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(g) = self.slot(*a, grads) {
                    g.iter_mut().zip(gout).zip(x).for_each(|((g, &d), &x)| *g += d * gelu_derivative(x));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = self.dims2(*x)?;
                let gv = self.value(*gain).data();
                if let Some(gx) = self.slot(*x, grads) {
                    let nf = S::lit(n as f64);
                    for i in 0..m {
                        let dy = &gout[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let scale = inv_std[i] / nf;
                        for j in 0..n {
                            let d = dy[j] * gv[j];
                            gx[i * n + j] += scale * (nf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = self.slot(*gain, grads) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    for chunk in gout.chunks(n) {
                        acc(gb, chunk);
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let n = *out.shape().last().expect("shape");
                if let Some(g) = self.slot(*a, grads) {
                    for ((y, d), gx) in out.data().chunks(n).zip(gout.chunks(n)).zip(g.chunks_mut(n)) {
                        let dot: S = y.iter().zip(d).map(|(&y, &d)| y * d).sum();
                        for j in 0..n {
                            gx[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().expect("shape");
                if let Some(g) = self.slot(*a, grads) {
                    for ((y, d), gx) in out.data().chunks(n).zip(gout.chunks(n)).zip(g.chunks_mut(n)) {
                        let total: S = d.iter().copied().sum();
                        for j in 0..n {
                            gx[j] += d[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let floor = S::lit(LOG_CLAMP);
                let x = self.value(*a).data();
                if let Some(g) = self.slot(*a, grads) {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                        if x > floor {
                            *g += d / x;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = self.dims2(*table)?.1;
                if let Some(g) = self.slot(*table, grads) {
                    for (r, &id) in ids.iter().enumerate() {
                        acc(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SelectHead { x, head } => {
                let len = gout.len();
                if let Some(g) = self.slot(*x, grads) {
                    acc(&mut g[head * len..(head + 1) * len], gout);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x)?;
                let w = out.dims2()?.1;
                if let Some(g) = self.slot(*x, grads) {
                    for i in 0..m {
                        acc(&mut g[i * n + start..i * n + start + w], &gout[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(g) = self.slot(*p, grads) {
                        acc(g, &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2()?;
                let mut col = 0;
                for p in parts {
                    let w = self.dims2(*p)?.1;
                    if let Some(g) = self.slot(*p, grads) {
                        for i in 0..rows {
                            acc(&mut g[i * w..(i + 1) * w], &gout[i * total + col..i * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.slot(*a, grads) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims2(*a)?;
                let inv = S::one() / S::lit(m as f64);
                if let Some(g) = self.slot(*a, grads) {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[j] * inv;
                        }
                    }
                }
            }
            Op::SumIndices { x, ids } => {
                if let Some(g) = self.slot(*x, grads) {
                    for &i in ids {
                        g[i] += gout[0];
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(g) = self.slot(*x, grads) {
                    g[*index] += gout[0];
                }
            }
        }
        Ok(())
    }

    /// Lazily-allocated gradient buffer for `v`, or `None` when `v` does
    /// not need one.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<S>>]) -> Option<&'g mut [S]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]).as_mut_slice())
    }
}

fn acc<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(0.044715);
    S::lit(0.5) * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let k = S::lit(0.044715);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = S::lit(0.5);
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::lit(3.0) * k * x * x)
}
