//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Every value is a dense row-major `f64` matrix ([`Tensor`]); scalars are
//! `1 x 1` and vectors are `1 x n`. Operations are appended to a [`Tape`] in
//! evaluation order, so the node list is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The same machinery serves two purposes: parameter gradients for training
//! and gradients with respect to input embeddings for token attribution. A
//! tape is never mutated by `backward`, so several backward passes from
//! different roots can share one forward recording.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalarRoot([usize; 2]),
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: [usize; 2], len: usize },
    #[error("{op} needs {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(AutodiffError::BadData {
                shape: [rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutodiffError::BadData {
                    shape: [rows.len(), cols],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain matrix product, no shape validation.
    fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        Tensor {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// Sum over rows, yielding a `1 x cols` tensor.
    fn sum_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row_slice(r)) {
                *o += v;
            }
        }
        Tensor::row(out)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Relu,
    Sigmoid,
    LogSigmoid,
    LayerNormRows,
    GatherRows(Vec<usize>),
    Sum,
    Max,
    Transpose,
    SliceCols { start: usize, end: usize },
    ConcatCols,
    Pick(Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    // saved: per-row reciprocal standard deviation
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Max(Var, usize),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Pick(Var, Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Ids of all trainable leaves in creation order.
    pub fn leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Registers a tensor whose gradient is retained by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Generic entry point: applies `kind` to `inputs` and records it.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |expected: usize, op: &'static str| {
            if inputs.len() == expected {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op,
                    expected,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            OpKind::MatMul => arity(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(s) => arity(1, "scale").and_then(|_| self.scale(inputs[0], s)),
            OpKind::AddScalar(s) => arity(1, "add_scalar").and_then(|_| self.add_scalar(inputs[0], s)),
            OpKind::SoftmaxRows => arity(1, "softmax").and_then(|_| self.softmax_rows(inputs[0])),
            OpKind::LogSoftmaxRows => {
                arity(1, "log_softmax").and_then(|_| self.log_softmax_rows(inputs[0]))
            }
            OpKind::Log => arity(1, "log").and_then(|_| self.log(inputs[0])),
            OpKind::Exp => arity(1, "exp").and_then(|_| self.exp(inputs[0])),
            OpKind::Relu => arity(1, "relu").and_then(|_| self.relu(inputs[0])),
            OpKind::Sigmoid => arity(1, "sigmoid").and_then(|_| self.sigmoid(inputs[0])),
            OpKind::LogSigmoid => arity(1, "log_sigmoid").and_then(|_| self.log_sigmoid(inputs[0])),
            OpKind::LayerNormRows => {
                arity(1, "layernorm").and_then(|_| self.layernorm_rows(inputs[0]))
            }
            OpKind::GatherRows(idx) => {
                arity(1, "gather_rows").and_then(|_| self.gather_rows(inputs[0], &idx))
            }
            OpKind::Sum => arity(1, "sum").and_then(|_| self.sum(inputs[0])),
            OpKind::Max => arity(1, "max").and_then(|_| self.max(inputs[0])),
            OpKind::Transpose => arity(1, "transpose").and_then(|_| self.transpose(inputs[0])),
            OpKind::SliceCols { start, end } => {
                arity(1, "slice_cols").and_then(|_| self.slice_cols(inputs[0], start, end))
            }
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::Pick(idx) => arity(1, "pick").and_then(|_| self.pick(inputs[0], &idx)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let out = Tensor::matmul_raw(ta, tb);
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Checks elementwise compatibility: equal shapes, or `rhs` is a single
    /// row broadcast over the leading axis of `lhs`.
    fn broadcast_ok(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || (sb[0] == 1 && sb[1] == sa[1]) {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let brow = if tb.rows == 1 { 0 } else { r };
            for c in 0..ta.cols {
                let i = r * ta.cols + c;
                out.data[i] = f(ta.data[i], tb.data[brow * tb.cols + c]);
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.record("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.record("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(a));
        self.record("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.record("log", out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.record("exp", out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.record("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// `log(sigmoid(x))`, evaluated without underflow for large `-x`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(log_sigmoid);
        self.record("log_sigmoid", out, Op::LogSigmoid(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layernorm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols as f64;
        let mut out = t.clone();
        let mut rstd = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        self.record("layernorm", out, Op::LayerNorm(a, rstd), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            if i >= t.rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: t.rows,
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor {
            rows: idx.len(),
            cols: t.cols,
            data,
        };
        self.record("gather_rows", out, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Maximum over all entries; ties resolve to the first maximal index.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "max",
                index: 0,
                extent: 0,
            });
        }
        let mut arg = 0;
        for (i, &v) in t.data.iter().enumerate() {
            if v > t.data[arg] {
                arg = i;
            }
        }
        let m = t.data[arg];
        self.record("max", Tensor::scalar(m), Op::Max(a, arg), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.record("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                extent: t.cols,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows * w);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor {
            rows: t.rows,
            cols: w,
            data,
        };
        self.record("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Arity {
                op: "concat_cols",
                expected: 1,
                got: 0,
            });
        };
        let rows = self.value(first).rows;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape(),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor { rows, cols, data };
        self.record("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Collects the entries at `(row, col)` positions into a `1 x k` vector.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= t.rows || c >= t.cols {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick",
                    index: r.max(c),
                    extent: if r >= t.rows { t.rows } else { t.cols },
                });
            }
            data.push(t.get(r, c));
        }
        self.record("pick", Tensor::row(data), Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every node on the path receives the sum of its incoming contributions;
    /// leaves that `root` does not depend on get a zero gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape[0] * shape[1] != 1 {
            return Err(AutodiffError::NotScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes[..=root.0].iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, Tensor::matmul_raw(g, &val(*b).transpose()));
                }
                if self.requires_grad(*b) {
                    acc(*b, Tensor::matmul_raw(&val(*a).transpose(), g));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                if self.requires_grad(*b) {
                    let gb = reduce_broadcast(g, val(*b).shape()).map(|x| sign * x);
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        let br = if tb.rows == 1 { 0 } else { r };
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] *= tb.data[br * tb.cols + c];
                        }
                    }
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut prod = g.clone();
                    for (p, x) in prod.data.iter_mut().zip(&ta.data) {
                        *p *= x;
                    }
                    acc(*b, reduce_broadcast(&prod, tb.shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows {
                    let gsum: f64 = g.row_slice(r).iter().sum();
                    for c in 0..y.cols {
                        let i = r * y.cols + c;
                        dx.data[i] = g.data[i] - y.data[i].exp() * gsum;
                    }
                }
                acc(*a, dx);
            }
            Op::Log(a) => {
                let x = val(*a);
                let mut dx = g.clone();
                for (d, xv) in dx.data.iter_mut().zip(&x.data) {
                    *d /= xv;
                }
                acc(*a, dx);
            }
            Op::Exp(a) => {
                let mut dx = g.clone();
                for (d, y) in dx.data.iter_mut().zip(&node.value.data) {
                    *d *= y;
                }
                acc(*a, dx);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let mut dx = g.clone();
                for (d, xv) in dx.data.iter_mut().zip(&x.data) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*a, dx);
            }
            Op::Sigmoid(a) => {
                let mut dx = g.clone();
                for (d, y) in dx.data.iter_mut().zip(&node.value.data) {
                    *d *= y * (1.0 - y);
                }
                acc(*a, dx);
            }
            Op::LogSigmoid(a) => {
                let x = val(*a);
                let mut dx = g.clone();
                for (d, xv) in dx.data.iter_mut().zip(&x.data) {
                    *d *= sigmoid(-xv);
                }
                acc(*a, dx);
            }
            Op::LayerNorm(a, rstd) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut dx = g.clone();
                for r in 0..y.rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = rstd[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                acc(*a, dx);
            }
            Op::GatherRows(table, idx) => {
                let t = val(*table);
                let mut dt = Tensor::zeros(t.rows, t.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..t.cols {
                        dt.data[i * t.cols + c] += g.data[r * t.cols + c];
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(a) => {
                let s = val(*a).shape();
                acc(*a, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::Max(a, arg) => {
                let s = val(*a).shape();
                let mut dx = Tensor::zeros(s[0], s[1]);
                dx.data[*arg] = g.item();
                acc(*a, dx);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SliceCols(a, start) => {
                let s = val(*a).shape();
                let mut dx = Tensor::zeros(s[0], s[1]);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        dx.data[r * s[1] + start + c] = g.data[r * g.cols + c];
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    if self.requires_grad(p) {
                        let mut dp = Tensor::zeros(s[0], s[1]);
                        for r in 0..s[0] {
                            for c in 0..s[1] {
                                dp.data[r * s[1] + c] = g.data[r * g.cols + offset + c];
                            }
                        }
                        acc(p, dp);
                    }
                    offset += s[1];
                }
            }
            Op::Pick(a, idx) => {
                let s = val(*a).shape();
                let mut dx = Tensor::zeros(s[0], s[1]);
                for (k, &(r, c)) in idx.iter().enumerate() {
                    dx.data[r * s[1] + c] += g.data[k];
                }
                acc(*a, dx);
            }
        }
    }
}

fn reduce_broadcast(g: &Tensor, target: [usize; 2]) -> Tensor {
    if g.shape() == target {
        g.clone()
    } else {
        g.sum_rows()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise log-softmax outside of any tape.
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows {
        let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`; a zero tensor when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => {
                let s = self.shapes[v.0];
                Tensor::zeros(s[0], s[1])
            }
            // created after the root: cannot influence it
            None => Tensor::zeros(0, 0),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
