//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly on [`Graph::apply`]; [`Graph::backward`] walks the tape in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference nodes created before it.
//!
//! Batched network code keeps one row per (sequence, particle) pair, so most
//! operations are defined on rank-2 tensors. Broadcasting is limited to
//! scalar-with-tensor products and row-vector bias addition.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count of a rank-2 tensor (1 for rank 0 and 1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a rank-2 tensor (length for rank 1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Operation tag recorded on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    /// Hadamard product.
    Mul,
    Div,
    /// `[n, m] + [m]`: row-vector bias broadcast.
    AddRow,
    /// Tensor times a one-element tensor.
    MulScalar,
    Scale(f64),
    Offset(f64),
    Neg,
    MatMul,
    /// Column-wise concatenation of rank-2 operands with equal row counts.
    Concat,
    /// Column range `[start, end)` of a rank-2 operand.
    Slice {
        start: usize,
        end: usize,
    },
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `None` sums everything to a scalar, `Some(1)` sums each row to `[n, 1]`.
    ReduceSum {
        axis: Option<usize>,
    },
    ReduceLogSumExp {
        axis: Option<usize>,
    },
    Reshape(Vec<usize>),
    GatherRows(Vec<usize>),
    /// `[m]` or `[1, m]` repeated to `[n, m]`.
    BroadcastRows(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    needs_grad: bool,
}

/// Per-step tape. Single-threaded; build, differentiate, drop.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(TensorError::BadRank {
            op,
            expected: "rank-2 tensor",
            shape: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn row_vector_len(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape.as_slice() {
        [m] => Ok(*m),
        [1, m] => Ok(*m),
        _ => Err(TensorError::BadRank {
            op,
            expected: "row vector [m] or [1, m]",
            shape: t.shape.clone(),
        }),
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn forward(op: &Op, xs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize, name: &'static str| -> Result<()> {
        if xs.len() != n {
            return Err(TensorError::Invalid {
                op: name,
                msg: format!("expected {n} operands, got {}", xs.len()),
            });
        }
        Ok(())
    };
    match op {
        Op::Leaf => Err(TensorError::Invalid {
            op: "leaf",
            msg: "leaves are created with Graph::param or Graph::constant".into(),
        }),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let name = match op {
                Op::Add => "add",
                Op::Sub => "sub",
                Op::Mul => "mul",
                _ => "div",
            };
            arity(2, name)?;
            same_shape(name, xs[0], xs[1])?;
            Ok(match op {
                Op::Add => xs[0].zip(xs[1], |a, b| a + b),
                Op::Sub => xs[0].zip(xs[1], |a, b| a - b),
                Op::Mul => xs[0].zip(xs[1], |a, b| a * b),
                _ => xs[0].zip(xs[1], |a, b| a / b),
            })
        }
        Op::AddRow => {
            arity(2, "add_row")?;
            let (_, m) = rank2("add_row", xs[0])?;
            let bm = row_vector_len("add_row", xs[1])?;
            if bm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: xs[0].shape.clone(),
                    right: xs[1].shape.clone(),
                });
            }
            let b = &xs[1].data;
            let mut out = xs[0].clone();
            for row in out.data.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
            Ok(out)
        }
        Op::MulScalar => {
            arity(2, "mul_scalar")?;
            if xs[1].numel() != 1 {
                return Err(TensorError::BadRank {
                    op: "mul_scalar",
                    expected: "one-element scalar operand",
                    shape: xs[1].shape.clone(),
                });
            }
            let s = xs[1].data[0];
            Ok(xs[0].map(|v| v * s))
        }
        Op::Scale(c) => {
            arity(1, "scale")?;
            Ok(xs[0].map(|v| v * c))
        }
        Op::Offset(c) => {
            arity(1, "offset")?;
            Ok(xs[0].map(|v| v + c))
        }
        Op::Neg => {
            arity(1, "neg")?;
            Ok(xs[0].map(|v| -v))
        }
        Op::MatMul => {
            arity(2, "matmul")?;
            let (n, k) = rank2("matmul", xs[0])?;
            let (k2, m) = rank2("matmul", xs[1])?;
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: xs[0].shape.clone(),
                    right: xs[1].shape.clone(),
                });
            }
            Tensor::matrix(n, m, matmul(&xs[0].data, &xs[1].data, n, k, m))
        }
        Op::Concat => {
            if xs.is_empty() {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "no operands".into(),
                });
            }
            let (n, _) = rank2("concat", xs[0])?;
            let mut total = 0;
            for x in xs {
                let (r, c) = rank2("concat", x)?;
                if r != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: xs[0].shape.clone(),
                        right: x.shape.clone(),
                    });
                }
                total += c;
            }
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for x in xs {
                    data.extend_from_slice(x.row(r));
                }
            }
            Tensor::matrix(n, total, data)
        }
        Op::Slice { start, end } => {
            arity(1, "slice")?;
            let (n, m) = rank2("slice", xs[0])?;
            if start >= end || *end > m {
                return Err(TensorError::Invalid {
                    op: "slice",
                    msg: format!("column range {start}..{end} invalid for shape {:?}", xs[0].shape),
                });
            }
            let mut data = Vec::with_capacity(n * (end - start));
            for r in 0..n {
                data.extend_from_slice(&xs[0].row(r)[*start..*end]);
            }
            Tensor::matrix(n, end - start, data)
        }
        Op::Sigmoid => {
            arity(1, "sigmoid")?;
            Ok(xs[0].map(sigmoid))
        }
        Op::Tanh => {
            arity(1, "tanh")?;
            Ok(xs[0].map(f64::tanh))
        }
        Op::Softplus => {
            arity(1, "softplus")?;
            Ok(xs[0].map(softplus))
        }
        Op::Exp => {
            arity(1, "exp")?;
            Ok(xs[0].map(f64::exp))
        }
        Op::Log => {
            arity(1, "log")?;
            Ok(xs[0].map(f64::ln))
        }
        Op::Square => {
            arity(1, "square")?;
            Ok(xs[0].map(|v| v * v))
        }
        Op::Clamp { lo, hi } => {
            arity(1, "clamp")?;
            Ok(xs[0].map(|v| v.clamp(*lo, *hi)))
        }
        Op::ReduceSum { axis } | Op::ReduceLogSumExp { axis } => {
            let lse = matches!(op, Op::ReduceLogSumExp { .. });
            let name = if lse { "reduce_logsumexp" } else { "reduce_sum" };
            arity(1, name)?;
            let reduce = |xs: &[f64]| {
                if lse {
                    logsumexp(xs)
                } else {
                    xs.iter().sum()
                }
            };
            match axis {
                None => Ok(Tensor::scalar(reduce(&xs[0].data))),
                Some(1) => {
                    let (n, m) = rank2(name, xs[0])?;
                    let data = xs[0].data.chunks(m).map(reduce).collect();
                    Tensor::matrix(n, 1, data)
                }
                Some(a) => Err(TensorError::Invalid {
                    op: name,
                    msg: format!("unsupported axis {a}"),
                }),
            }
        }
        Op::Reshape(shape) => {
            arity(1, "reshape")?;
            xs[0].reshaped(shape.clone())
        }
        Op::GatherRows(idx) => {
            arity(1, "gather_rows")?;
            let (n, m) = rank2("gather_rows", xs[0])?;
            let mut data = Vec::with_capacity(idx.len() * m);
            for &i in idx {
                if i >= n {
                    return Err(TensorError::Invalid {
                        op: "gather_rows",
                        msg: format!("row index {i} out of range for {n} rows"),
                    });
                }
                data.extend_from_slice(xs[0].row(i));
            }
            Tensor::matrix(idx.len(), m, data)
        }
        Op::BroadcastRows(n) => {
            arity(1, "broadcast_rows")?;
            let m = row_vector_len("broadcast_rows", xs[0])?;
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..*n {
                data.extend_from_slice(&xs[0].data);
            }
            Tensor::matrix(*n, m, data)
        }
    }
}

/// Dense gradients indexed by node; unreachable nodes read as zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<Var>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new(), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Records `op` applied to `operands` and returns the result node.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var> {
        let value = {
            let xs: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &xs)?
        };
        let needs_grad = operands.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, operands.to_vec(), needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[a, bias])
    }
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.apply(Op::MulScalar, &[a, s])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Offset(c), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { start, end }, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::ReduceSum { axis: None }, &[a])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::ReduceSum { axis: Some(1) }, &[a])
    }
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::ReduceLogSumExp { axis: None }, &[a])
    }
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::ReduceLogSumExp { axis: Some(1) }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape(shape.into()), &[a])
    }
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(Op::GatherRows(idx), &[a])
    }
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.apply(Op::BroadcastRows(n), &[a])
    }

    /// `x·W + b` for rows `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape.clone(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(node, &g);
            grads[i] = Some(g);
            for (p, pg) in node.parents.iter().zip(contributions) {
                if let Some(pg) = pg {
                    if self.nodes[p.0].needs_grad {
                        accumulate(&mut grads[p.0], pg);
                    }
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let wants = |k: usize| self.nodes[node.parents[k].0].needs_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                wants(0).then(|| g.zip(pv(1), |a, b| a * b)),
                wants(1).then(|| g.zip(pv(0), |a, b| a * b)),
            ],
            Op::Div => {
                let (a, b) = (pv(0), pv(1));
                let ga = wants(0).then(|| g.zip(b, |gv, bv| gv / bv));
                let gb = wants(1).then(|| {
                    let t = g.zip(a, |gv, av| gv * av);
                    t.zip(b, |tv, bv| -tv / (bv * bv))
                });
                vec![ga, gb]
            }
            Op::AddRow => {
                let bias = pv(1);
                let m = bias.numel();
                let mut gb = Tensor::zeros(bias.shape.clone());
                for row in g.data.chunks(m) {
                    for (a, &v) in gb.data.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(g.clone()), Some(gb)]
            }
            Op::MulScalar => {
                let s = pv(1).data[0];
                let ga = wants(0).then(|| g.map(|v| v * s));
                let gs = wants(1).then(|| {
                    let total: f64 = g.data.iter().zip(&pv(0).data).map(|(a, b)| a * b).sum();
                    Tensor::full(pv(1).shape.clone(), total)
                });
                vec![ga, gs]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::Offset(_) => vec![Some(g.clone())],
            Op::Neg => vec![Some(g.map(|v| -v))],
            Op::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (n, k) = (a.shape[0], a.shape[1]);
                let m = b.shape[1];
                let ga = wants(0).then(|| {
                    // g [n,m] · bᵀ [m,k]
                    let mut out = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b.data[p * m..(p + 1) * m];
                            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor {
                        shape: vec![n, k],
                        data: out,
                    }
                });
                let gb = wants(1).then(|| {
                    // aᵀ [k,n] · g [n,m]
                    let mut out = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = a.data[i * k + p];
                            let orow = &mut out[p * m..(p + 1) * m];
                            for (o, &gv) in orow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    Tensor {
                        shape: vec![k, m],
                        data: out,
                    }
                });
                vec![ga, gb]
            }
            Op::Concat => {
                let n = y.shape[0];
                let total = y.shape[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for k in 0..node.parents.len() {
                    let c = pv(k).shape[1];
                    if wants(k) {
                        let mut data = Vec::with_capacity(n * c);
                        for r in 0..n {
                            data.extend_from_slice(&g.data[r * total + offset..r * total + offset + c]);
                        }
                        out.push(Some(Tensor {
                            shape: vec![n, c],
                            data,
                        }));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::Slice { start, end } => {
                let x = pv(0);
                let (n, m) = (x.shape[0], x.shape[1]);
                let w = end - start;
                let mut gx = Tensor::zeros(vec![n, m]);
                for r in 0..n {
                    gx.data[r * m + start..r * m + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            }
            Op::Sigmoid => vec![Some(g.zip(y, |gv, s| gv * s * (1.0 - s)))],
            Op::Tanh => vec![Some(g.zip(y, |gv, t| gv * (1.0 - t * t)))],
            Op::Softplus => vec![Some(g.zip(pv(0), |gv, x| gv * sigmoid(x)))],
            Op::Exp => vec![Some(g.zip(y, |gv, e| gv * e))],
            Op::Log => vec![Some(g.zip(pv(0), |gv, x| gv / x))],
            Op::Square => vec![Some(g.zip(pv(0), |gv, x| 2.0 * x * gv))],
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![Some(g.zip(pv(0), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }))]
            }
            Op::ReduceSum { axis } => {
                let x = pv(0);
                let gx = match axis {
                    None => Tensor::full(x.shape.clone(), g.data[0]),
                    _ => {
                        let m = x.shape[1];
                        let mut t = Tensor::zeros(x.shape.clone());
                        for (row, &gv) in t.data.chunks_mut(m).zip(&g.data) {
                            row.iter_mut().for_each(|v| *v = gv);
                        }
                        t
                    }
                };
                vec![Some(gx)]
            }
            Op::ReduceLogSumExp { axis } => {
                let x = pv(0);
                let gx = match axis {
                    None => {
                        let l = y.data[0];
                        let gv = g.data[0];
                        x.map(|v| if l.is_finite() { gv * (v - l).exp() } else { 0.0 })
                    }
                    _ => {
                        let m = x.shape[1];
                        let mut t = x.clone();
                        for ((row, &l), &gv) in t.data.chunks_mut(m).zip(&y.data).zip(&g.data) {
                            for v in row.iter_mut() {
                                *v = if l.is_finite() { gv * (*v - l).exp() } else { 0.0 };
                            }
                        }
                        t
                    }
                };
                vec![Some(gx)]
            }
            Op::Reshape(_) => vec![Some(Tensor {
                shape: pv(0).shape.clone(),
                data: g.data.clone(),
            })],
            Op::GatherRows(idx) => {
                let x = pv(0);
                let m = x.shape[1];
                let mut gx = Tensor::zeros(x.shape.clone());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data[r * m..(r + 1) * m];
                    for (a, &v) in gx.data[i * m..(i + 1) * m].iter_mut().zip(src) {
                        *a += v;
                    }
                }
                vec![Some(gx)]
            }
            Op::BroadcastRows(_) => {
                let x = pv(0);
                let m = x.numel();
                let mut gx = Tensor::zeros(x.shape.clone());
                for row in g.data.chunks(m) {
                    for (a, &v) in gx.data.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(gx)]
            }
        }
    }
}

/// Maximum relative discrepancy between analytic and central-difference
/// gradients of the scalar built by `build` over every entry of `leaves`.
///
/// Relative error per entry is `|analytic - fd| / (|fd| + 1e-8)`.
pub fn finite_difference_check<F, E>(leaves: &[Tensor], build: F, eps: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |inputs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..leaves[li].numel() {
            let orig = leaves[li].data[j];
            work[li].data[j] = orig + eps;
            let fp = eval(&work)?;
            work[li].data[j] = orig - eps;
            let fm = eval(&work)?;
            work[li].data[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (analytic.data[j] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
