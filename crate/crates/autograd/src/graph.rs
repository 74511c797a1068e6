//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a parameter. Gradients for parameters are returned keyed by
//! [`ParamId`], summed over every leaf that referenced the same parameter.

use std::collections::BTreeMap;

use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::GradError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Operation kinds, used for fault injection in negative-control tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    MatMul,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// rhs is `[cols]` or `[1, cols]`, repeated over rows.
    Row,
    /// rhs is `[rows, 1]`, repeated over columns.
    Col,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax { x: Var, causal: bool },
    Mean(Var),
    Sum(Var),
    RowMean(Var),
    RowDot(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter it touched.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A single forward/backward computation. Not shareable across threads;
/// build one graph per example.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    faults: Vec<OpKind>,
}

fn shape_err(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward pass of `kind` deliberately wrong. Only meant for
    /// negative-control tests of gradient checking.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.faults.push(kind);
    }

    fn faulty(&self, kind: OpKind) -> bool {
        self.faults.contains(&kind)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b, _) | Op::RowDot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::LogSigmoid(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::RowMean(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(xs) => xs.clone(),
            Op::SliceCols { x, .. } | Op::Softmax { x, .. } | Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::SelectRows { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    /// A value that never receives gradients (frozen features, masks, inputs).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, GradError> {
        self.push(value, Op::Constant, "constant")
    }

    /// A leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, GradError> {
        self.push(store.get(id).clone(), Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.value(a).require_2d("matmul")?;
        let (k2, n) = self.value(b).require_2d("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, GradError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if sa.len() == 2 {
            let (r, c) = (sa[0], sa[1]);
            if sb == [c] || sb == [1, c] {
                return Ok(Bcast::Row);
            }
            if sb == [r, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
    }

    fn binary(&self, a: Var, b: Var, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b).data();
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Bcast::Same => vb[i],
                    Bcast::Row => vb[i % cols],
                    Bcast::Col => vb[i / cols],
                    Bcast::Scalar => vb[0],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape as lhs")
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let kind = self.broadcast_kind("add", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x + y);
        self.push(out, Op::Add(a, b, kind), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x * y);
        self.push(out, Op::Mul(a, b, kind), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, GradError> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect())?;
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let (m, n) = self.value(a).require_2d("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), "transpose")
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        let first = *xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let (rows, _) = self.value(first).require_2d("concat")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).require_2d("concat")?;
            if r != rows {
                return Err(shape_err("concat", format!("row counts {rows} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(xs.to_vec()), "concat")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (rows, cols) = self.value(x).require_2d("slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Gathers rows of a 2-D table; this is the embedding lookup.
    pub fn select_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, GradError> {
        let (rows, cols) = self.value(table).require_2d("select_rows")?;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(GradError::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::new(vec![indices.len(), cols], out)?;
        self.push(t, Op::SelectRows { table, indices: indices.to_vec() }, "select_rows")
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, GradError> {
        self.select_rows(table, ids)
    }

    /// Per-row layer normalization with learned gain and bias of shape `[cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, GradError> {
        let (rows, cols) = self.value(x).require_2d("layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(shape_err("layer_norm", format!("affine {:?} for {cols} cols", self.shape(p))));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var, GradError> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        self.push(out, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    /// Natural log; non-positive inputs surface as `NonFinite`.
    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    /// Stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a), "log_sigmoid")
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`
    /// and its output is exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var, GradError> {
        let (rows, cols) = self.value(x).require_2d("softmax")?;
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            if limit == 0 {
                continue;
            }
            let row = &v.row(r)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..limit {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..limit {
                out[r * cols + c] /= sum;
            }
        }
        self.push(Tensor::new(vec![rows, cols], out)?, Op::Softmax { x, causal }, "softmax")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean over columns of a 2-D tensor, giving `[rows]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var, GradError> {
        let (rows, cols) = self.value(a).require_2d("row_mean")?;
        let v = self.value(a);
        let out = (0..rows).map(|r| v.row(r).iter().sum::<f64>() / cols as f64).collect();
        self.push(Tensor::vector(out), Op::RowMean(a), "row_mean")
    }

    /// Dot product of matching rows: `[rows, d] x [rows, d] -> [rows]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ra, ca) = self.value(a).require_2d("row_dot")?;
        let (rb, cb) = self.value(b).require_2d("row_dot")?;
        if (ra, ca) != (rb, cb) {
            return Err(shape_err("row_dot", format!("[{ra}, {ca}] vs [{rb}, {cb}]")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..ra)
            .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.push(Tensor::vector(out), Op::RowDot(a, b), "row_dot")
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, GradError> {
        let (rows, cols) = self.value(x).require_2d("l2_normalize_rows")?;
        let v = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let n = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(GradError::ZeroVector { op: "l2_normalize_rows" });
            }
            norms.push(n);
            out.extend(v.row(r).iter().map(|a| a / n));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::L2NormalizeRows { x, norms }, "l2_normalize_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Reverse pass from a scalar `loss`. Node gradients stay available via
    /// [`Graph::grad`]; parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(GradError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            let acc = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(delta) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    let mut single = Gradients::default();
                    single.by_param.insert(*id, t);
                    out.accumulate(&single);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).require_2d("matmul")?;
                    let n = self.value(*b).cols();
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = matmul_nt(&g, bv, m, n, k);
                    let gb = matmul_tn(av, &g, m, k, n);
                    if self.faulty(OpKind::MatMul) {
                        ga.iter_mut().for_each(|v| *v *= 0.5);
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b, kind) => {
                    acc(*a, g.clone(), &mut grads);
                    let gb = reduce_broadcast(&g, self.value(*a), self.value(*b).numel(), *kind);
                    acc(*b, gb, &mut grads);
                }
                Op::Mul(a, b, kind) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let cols = self.value(*a).cols();
                    let pick = |i: usize| match kind {
                        Bcast::Same => bv[i],
                        Bcast::Row => bv[i % cols],
                        Bcast::Col => bv[i / cols],
                        Bcast::Scalar => bv[0],
                    };
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, d)| d * pick(i)).collect();
                    let prod: Vec<f64> = g.iter().zip(av).map(|(d, x)| d * x).collect();
                    let gb = reduce_broadcast(&prod, self.value(*a), bv.len(), *kind);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, f) => acc(*a, g.iter().map(|d| d * f).collect(), &mut grads),
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g, &mut grads),
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).require_2d("transpose")?;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::ConcatCols(xs) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for x in xs {
                        let w = self.value(*x).cols();
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(*x, gx, &mut grads);
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).require_2d("slice_cols")?;
                    let len = node.value.cols();
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::SelectRows { table, indices } => {
                    let (rows, cols) = self.value(*table).require_2d("select_rows")?;
                    let mut gt = vec![0.0; rows * cols];
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[k * cols + c];
                        }
                    }
                    acc(*table, gt, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = node.value.require_2d("layer_norm")?;
                    let gv = self.value(*gamma).data();
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let dy = g[off + c];
                            gg[c] += dy * xhat[off + c];
                            gbeta[c] += dy;
                            let dxh = dy * gv[c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[off + c];
                        }
                        for c in 0..cols {
                            let dxh = g[off + c] * gv[c];
                            gx[off + c] = if self.faulty(OpKind::LayerNorm) {
                                dxh * inv_std[r]
                            } else {
                                inv_std[r] / n * (n * dxh - sum_d - xhat[off + c] * sum_dx)
                            };
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gamma, gg, &mut grads);
                    acc(*beta, gbeta, &mut grads);
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let ga = if self.faulty(OpKind::Relu) {
                        g.clone()
                    } else {
                        g.iter().zip(av).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect()
                    };
                    acc(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = g
                        .iter()
                        .zip(y)
                        .map(|(d, s)| if self.faulty(OpKind::Sigmoid) { *d * s } else { d * s * (1.0 - s) })
                        .collect();
                    acc(*a, ga, &mut grads);
                }
                Op::Log(a) => {
                    let av = self.value(*a).data();
                    acc(*a, g.iter().zip(av).map(|(d, x)| d / x).collect(), &mut grads);
                }
                Op::LogSigmoid(a) => {
                    let av = self.value(*a).data();
                    // d/dx ln(sigmoid(x)) = sigmoid(-x)
                    acc(*a, g.iter().zip(av).map(|(d, x)| d * sigmoid(-x)).collect(), &mut grads);
                }
                Op::Softmax { x, causal } => {
                    let (rows, cols) = node.value.require_2d("softmax")?;
                    let y = node.value.data();
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let limit = if *causal { (r + 1).min(cols) } else { cols };
                        let off = r * cols;
                        let dot: f64 = (0..limit).map(|c| y[off + c] * g[off + c]).sum();
                        for c in 0..limit {
                            gx[off + c] = if self.faulty(OpKind::Softmax) {
                                y[off + c] * g[off + c]
                            } else {
                                y[off + c] * (g[off + c] - dot)
                            };
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    acc(*a, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    acc(*a, vec![g[0]; n], &mut grads);
                }
                Op::RowMean(a) => {
                    let (rows, cols) = self.value(*a).require_2d("row_mean")?;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] = g[r] / cols as f64;
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::RowDot(a, b) => {
                    let (rows, cols) = self.value(*a).require_2d("row_dot")?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut ga = vec![0.0; rows * cols];
                    let mut gb = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] = g[r] * bv[r * cols + c];
                            gb[r * cols + c] = g[r] * av[r * cols + c];
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let (rows, cols) = node.value.require_2d("l2_normalize_rows")?;
                    let y = node.value.data();
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let off = r * cols;
                        let dot: f64 = (0..cols).map(|c| y[off + c] * g[off + c]).sum();
                        for c in 0..cols {
                            gx[off + c] = (g[off + c] - y[off + c] * dot) / norms[r];
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }
}

fn reduce_broadcast(g: &[f64], lhs: &Tensor, rhs_len: usize, kind: Bcast) -> Vec<f64> {
    let cols = lhs.cols();
    match kind {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; rhs_len];
            for (i, d) in g.iter().enumerate() {
                out[i % cols] += d;
            }
            out
        }
        Bcast::Col => {
            let mut out = vec![0.0; rhs_len];
            for (i, d) in g.iter().enumerate() {
                out[i / cols] += d;
            }
            out
        }
    }
}

/// `[m, k] x [k, n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g [m, n] x b^T` where `b` is `[k, n]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x g` where `a` is `[m, k]` and `g` is `[m, n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let a = t2(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.5, 6.0]]);
        let i = g.constant(Tensor::eye(2)).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn causal_softmax_first_row_is_one_hot() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[vec![0.3, 9.0, -2.0], vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]])).unwrap();
        let y = g.softmax(x, true).unwrap();
        assert_eq!(g.value(y).row(0), &[1.0, 0.0, 0.0]);
        let second = g.value(y).row(1);
        assert_eq!(second[2], 0.0);
        assert!((second[0] + second[1] - 1.0).abs() < 1e-12);
        let third = g.value(y).row(2);
        for v in third {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g
            .constant(t2(&[vec![1.0, 2.0, 3.0, 10.0], vec![-5.0, 0.1, 0.2, 7.5]]))
            .unwrap();
        let gamma = g.constant(Tensor::vector(vec![1.0; 4])).unwrap();
        let beta = g.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-8).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert!(matches!(g.log(x), Err(GradError::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(GradError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(g.add(a, c), Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_parameter_leaves_accumulate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id).unwrap();
        let b = g.param(&store, id).unwrap();
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![0.5, -0.5]));
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let c = g.constant(Tensor::vector(vec![2.0, 3.0])).unwrap();
        let p = g.mul(w, c).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(!g.requires_grad(c));
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn select_rows_checks_bounds() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            g.select_rows(t, &[0, 3]),
            Err(GradError::IndexOutOfRange { index: 3, len: 3 })
        ));
    }
}
