//! Define-by-run computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt per batch: every builder call appends one operation
//! record, computes its value eagerly, and returns a [`NodeId`]. Nodes are
//! therefore stored in topological order by construction. [`Graph::backward`]
//! walks the records in reverse, accumulating gradients; a leaf reached
//! through several paths (the weight-shared encoder) receives the sum of the
//! per-path gradients.
//!
//! Derivative conventions at kink points: `abs` uses subgradient 0 at 0, and
//! `elu` uses derivative 1 at 0 (its one-sided limits agree there).
//!
//! A graph and its tensors belong to one thread; distinct graphs over
//! read-only parameter snapshots may run concurrently.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} ({op}): {msg}")]
    Shape {
        node: usize,
        op: &'static str,
        msg: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("scalar output required, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called before forward evaluation")]
    BackwardBeforeForward,
    #[error("no leaf named {0:?} in this graph")]
    UnknownLeaf(String),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone)]
enum Op {
    /// Trainable leaf; its name lives in the graph's param map.
    Param,
    /// Non-trainable leaf, rebindable between evaluations.
    Input,
    /// Fixed tensor baked into the graph.
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    /// Contiguous row range of a matrix (or element range of a vector).
    RowSlice {
        input: NodeId,
        start: usize,
        rows: usize,
    },
    /// Single column of a matrix, as a vector.
    Column { input: NodeId, col: usize },
    Abs(NodeId),
    /// Mean over all elements, producing a scalar.
    Mean(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Elu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Row-wise softmax over the last axis.
    Softmax(NodeId),
    /// Fused, max-subtracted log-softmax over the last axis.
    LogSoftmax(NodeId),
    /// Mean of embedding-table rows per id list; an empty list pools to zero.
    EmbedMean { table: NodeId, ids: Vec<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::Concat(_) => "concat",
            Op::RowSlice { .. } => "row_slice",
            Op::Column { .. } => "column",
            Op::Abs(_) => "abs",
            Op::Mean(_) => "mean",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Elu(_) => "elu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::EmbedMean { .. } => "embed_mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// How two elementwise operands line up.
enum Broadcast {
    Equal,
    /// Left operand is a single element applied against every right element.
    LeftScalar,
    RightScalar,
    /// Left operand is a single row `[1, n]` repeated over the right's rows.
    LeftRow,
    RightRow,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    grads: Vec<Option<Tensor>>,
    forward_valid: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            grads: Vec::new(),
            // Values are computed eagerly at construction; only rebinding a
            // leaf invalidates them.
            forward_valid: true,
        }
    }
}

// ── numeric kernels ─────────────────────────────────────────────────

/// Two-branch logistic; no overflow for any finite input.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(x))` without intermediate underflow.
pub fn stable_log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn abs_subgradient(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `g[m,n] @ b[k,n]^T -> [m,k]`
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            orow[p] = s;
        }
    }
    out
}

/// `a[m,k]^T @ g[m,n] -> [k,n]`
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

/// Last-axis extent and the number of rows it tiles.
fn last_axis(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.is_scalar() {
            Ok(v.item())
        } else {
            Err(GraphError::NotScalar {
                shape: v.shape().to_vec(),
            })
        }
    }

    /// Names of trainable leaves, in sorted order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(GraphError::Usage(format!("duplicate param {name:?}")));
        }
        let id = self.push(Op::Param, value)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::Usage(format!("duplicate input {name:?}")));
        }
        let id = self.push(Op::Input, value)?;
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, value)
    }

    /// Rebind a named leaf (param or input) to a new value of the same shape.
    ///
    /// Invalidates forward values; call [`Graph::forward`] before reading
    /// downstream nodes again.
    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .get(name)
            .or_else(|| self.inputs.get(name))
            .copied()
            .ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        if self.nodes[id.0].value.shape() != value.shape() {
            return Err(GraphError::Usage(format!(
                "bind {name:?}: shape {:?} incompatible with leaf shape {:?}",
                value.shape(),
                self.nodes[id.0].value.shape()
            )));
        }
        self.nodes[id.0].value = value;
        self.forward_valid = false;
        Ok(())
    }

    // ── operations ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Matmul(a, b))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::Concat(parts.to_vec()))
    }

    pub fn row_slice(&mut self, input: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        self.push_op(Op::RowSlice { input, start, rows })
    }

    pub fn column(&mut self, input: NodeId, col: usize) -> Result<NodeId> {
        self.push_op(Op::Column { input, col })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Abs(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mean(x))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Neg(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push_op(Op::Scale(x, factor))
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Log(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::LogSoftmax(x))
    }

    pub fn embed_mean(&mut self, table: NodeId, ids: Vec<Vec<usize>>) -> Result<NodeId> {
        self.push_op(Op::EmbedMean { table, ids })
    }

    // ── evaluation ──────────────────────────────────────────────────

    /// Rebind the given leaves and recompute every node.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor)]) -> Result<()> {
        for (name, value) in bindings {
            self.bind(name, value.clone())?;
        }
        self.forward()
    }

    /// Recompute all non-leaf values in topological order.
    ///
    /// Repeated calls with identical leaf values are bit-identical: every
    /// kernel is a fixed-order sequential loop.
    pub fn forward(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            match self.nodes[idx].op {
                Op::Param | Op::Input | Op::Const => continue,
                _ => {
                    let value = self.compute(idx)?;
                    self.nodes[idx].value = value;
                }
            }
        }
        self.forward_valid = true;
        Ok(())
    }

    /// Gradient of a scalar output with respect to every node.
    ///
    /// After this returns, [`Graph::grad`] and [`Graph::param_grads`] expose
    /// the accumulated gradients.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if !self.forward_valid {
            return Err(GraphError::BackwardBeforeForward);
        }
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(GraphError::NotScalar {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = out_val.zeros_like();
        seed.data_mut()[0] = 1.0;
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer of a node from the latest [`Graph::backward`] pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable leaves; absent entries are zero tensors.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| self.value(*id).zeros_like());
                (name.clone(), g)
            })
            .collect()
    }

    /// Max relative error between analytic gradients and central differences.
    ///
    /// For every element of every trainable leaf the error is
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)` with the
    /// numeric side computed as `(f(x+eps) - f(x-eps)) / (2 eps)`.
    pub fn grad_check(&mut self, output: NodeId, eps: f64) -> Result<f64> {
        if eps <= 0.0 {
            return Err(GraphError::Usage(format!("eps must be positive, got {eps}")));
        }
        if !self.forward_valid {
            self.forward()?;
        }
        if !self.value(output).is_scalar() {
            return Err(GraphError::NotScalar {
                shape: self.value(output).shape().to_vec(),
            });
        }
        self.backward(output)?;
        let analytic = self.param_grads();

        let param_ids: Vec<(String, NodeId)> =
            self.params.iter().map(|(n, id)| (n.clone(), *id)).collect();
        let mut max_rel = 0.0_f64;
        for (name, id) in param_ids {
            let n = self.nodes[id.0].value.numel();
            for i in 0..n {
                let orig = self.nodes[id.0].value.data()[i];
                self.nodes[id.0].value.data_mut()[i] = orig + eps;
                self.forward()?;
                let f_plus = self.value(output).item();
                self.nodes[id.0].value.data_mut()[i] = orig - eps;
                self.forward()?;
                let f_minus = self.value(output).item();
                self.nodes[id.0].value.data_mut()[i] = orig;

                let numeric = (f_plus - f_minus) / (2.0 * eps);
                let a = analytic[&name].data()[i];
                let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                max_rel = max_rel.max(rel);
            }
        }
        self.forward()?;
        Ok(max_rel)
    }

    // ── internals ───────────────────────────────────────────────────

    fn push_op(&mut self, op: Op) -> Result<NodeId> {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: Tensor::scalar(0.0),
        });
        match self.compute(idx) {
            Ok(value) => {
                self.nodes[idx].value = value;
                Ok(NodeId(idx))
            }
            Err(e) => {
                self.nodes.pop();
                Err(e)
            }
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let idx = self.nodes.len();
        if !value.all_finite() {
            return Err(GraphError::NonFinite {
                node: idx,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(idx))
    }

    fn shape_err(&self, idx: usize, msg: String) -> GraphError {
        GraphError::Shape {
            node: idx,
            op: self.nodes[idx].op.name(),
            msg,
        }
    }

    fn broadcast_kind(&self, idx: usize, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::Equal);
        }
        if a.is_scalar() {
            return Ok(Broadcast::LeftScalar);
        }
        if b.is_scalar() {
            return Ok(Broadcast::RightScalar);
        }
        match (a.shape(), b.shape()) {
            ([1, n], [_, bn]) if n == bn => Ok(Broadcast::LeftRow),
            ([_, an], [1, n]) if n == an => Ok(Broadcast::RightRow),
            _ => Err(self.shape_err(
                idx,
                format!(
                    "operands {:?} and {:?} are not broadcast-compatible",
                    a.shape(),
                    b.shape()
                ),
            )),
        }
    }

    fn elementwise(
        &self,
        idx: usize,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let kind = self.broadcast_kind(idx, a, b)?;
        let out = match kind {
            Broadcast::Equal => {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| f(*x, *y))
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
            }
            Broadcast::LeftScalar => {
                let s = a.item();
                let data = b.data().iter().map(|y| f(s, *y)).collect();
                Tensor::new(b.shape().to_vec(), data).expect("shape preserved")
            }
            Broadcast::RightScalar => {
                let s = b.item();
                let data = a.data().iter().map(|x| f(*x, s)).collect();
                Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
            }
            Broadcast::LeftRow => {
                let (m, n) = b.dims2().expect("checked rank 2");
                let row = a.data();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        data.push(f(row[j], b.data()[i * n + j]));
                    }
                }
                Tensor::new(vec![m, n], data).expect("shape preserved")
            }
            Broadcast::RightRow => {
                let (m, n) = a.dims2().expect("checked rank 2");
                let row = b.data();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for j in 0..n {
                        data.push(f(a.data()[i * n + j], row[j]));
                    }
                }
                Tensor::new(vec![m, n], data).expect("shape preserved")
            }
        };
        Ok(out)
    }

    fn unary(&self, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let data = x.data().iter().map(|v| f(*v)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    fn compute(&self, idx: usize) -> Result<Tensor> {
        let value = match &self.nodes[idx].op {
            Op::Param | Op::Input | Op::Const => self.nodes[idx].value.clone(),
            Op::Add(a, b) => self.elementwise(idx, self.value(*a), self.value(*b), |x, y| x + y)?,
            Op::Sub(a, b) => self.elementwise(idx, self.value(*a), self.value(*b), |x, y| x - y)?,
            Op::Mul(a, b) => self.elementwise(idx, self.value(*a), self.value(*b), |x, y| x * y)?,
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().ok_or_else(|| {
                    self.shape_err(idx, format!("left operand must be rank 2, got {:?}", av.shape()))
                })?;
                let (k2, n) = bv.dims2().ok_or_else(|| {
                    self.shape_err(idx, format!("right operand must be rank 2, got {:?}", bv.shape()))
                })?;
                if k != k2 {
                    return Err(self.shape_err(
                        idx,
                        format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
                    ));
                }
                Tensor::new(vec![m, n], matmul(av.data(), bv.data(), m, k, n)).expect("sized")
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(self.shape_err(idx, "concat of zero tensors".into()));
                }
                let rank = self.value(parts[0]).rank();
                match rank {
                    1 => {
                        let mut data = Vec::new();
                        for p in parts {
                            let v = self.value(*p);
                            if v.rank() != 1 {
                                return Err(self.shape_err(idx, "mixed ranks in concat".into()));
                            }
                            data.extend_from_slice(v.data());
                        }
                        let len = data.len();
                        Tensor::new(vec![len], data).expect("sized")
                    }
                    2 => {
                        let (m, _) = self.value(parts[0]).dims2().expect("rank 2");
                        let mut widths = Vec::with_capacity(parts.len());
                        for p in parts {
                            let v = self.value(*p);
                            let (pm, pn) = v.dims2().ok_or_else(|| {
                                self.shape_err(idx, "mixed ranks in concat".into())
                            })?;
                            if pm != m {
                                return Err(self.shape_err(
                                    idx,
                                    format!("row counts differ in concat: {m} vs {pm}"),
                                ));
                            }
                            widths.push(pn);
                        }
                        let total: usize = widths.iter().sum();
                        let mut data = Vec::with_capacity(m * total);
                        for i in 0..m {
                            for (p, w) in parts.iter().zip(&widths) {
                                let v = self.value(*p);
                                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
                            }
                        }
                        Tensor::new(vec![m, total], data).expect("sized")
                    }
                    r => {
                        return Err(self.shape_err(idx, format!("concat unsupported for rank {r}")))
                    }
                }
            }
            Op::RowSlice { input, start, rows } => {
                let v = self.value(*input);
                match v.shape() {
                    [len] => {
                        if start + rows > *len {
                            return Err(self.shape_err(
                                idx,
                                format!("slice {start}..{} out of bounds for length {len}", start + rows),
                            ));
                        }
                        Tensor::new(vec![*rows], v.data()[*start..start + rows].to_vec())
                            .expect("sized")
                    }
                    [m, n] => {
                        if start + rows > *m {
                            return Err(self.shape_err(
                                idx,
                                format!("rows {start}..{} out of bounds for {m} rows", start + rows),
                            ));
                        }
                        Tensor::new(
                            vec![*rows, *n],
                            v.data()[start * n..(start + rows) * n].to_vec(),
                        )
                        .expect("sized")
                    }
                    s => return Err(self.shape_err(idx, format!("row_slice on rank {}", s.len()))),
                }
            }
            Op::Column { input, col } => {
                let v = self.value(*input);
                let (m, n) = v
                    .dims2()
                    .ok_or_else(|| self.shape_err(idx, format!("column on shape {:?}", v.shape())))?;
                if *col >= n {
                    return Err(self.shape_err(idx, format!("column {col} out of {n}")));
                }
                let data = (0..m).map(|i| v.data()[i * n + col]).collect();
                Tensor::new(vec![m], data).expect("sized")
            }
            Op::Abs(x) => self.unary(self.value(*x), f64::abs),
            Op::Mean(x) => {
                let v = self.value(*x);
                if v.numel() == 0 {
                    return Err(self.shape_err(idx, "mean of an empty tensor".into()));
                }
                Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)
            }
            Op::Neg(x) => self.unary(self.value(*x), |v| -v),
            Op::Scale(x, c) => {
                let c = *c;
                self.unary(self.value(*x), move |v| c * v)
            }
            Op::Elu(x) => self.unary(self.value(*x), elu),
            Op::Sigmoid(x) => self.unary(self.value(*x), stable_sigmoid),
            Op::LogSigmoid(x) => self.unary(self.value(*x), stable_log_sigmoid),
            Op::Exp(x) => self.unary(self.value(*x), f64::exp),
            Op::Log(x) => self.unary(self.value(*x), f64::ln),
            Op::Softmax(x) => {
                let v = self.value(*x);
                let (rows, n) = last_axis(v.shape()).ok_or_else(|| {
                    self.shape_err(idx, format!("softmax on shape {:?}", v.shape()))
                })?;
                let mut data = vec![0.0; v.numel()];
                for r in 0..rows {
                    let row = &v.data()[r * n..(r + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for (j, x) in row.iter().enumerate() {
                        let e = (x - max).exp();
                        data[r * n + j] = e;
                        denom += e;
                    }
                    for j in 0..n {
                        data[r * n + j] /= denom;
                    }
                }
                Tensor::new(v.shape().to_vec(), data).expect("sized")
            }
            Op::LogSoftmax(x) => {
                let v = self.value(*x);
                let (rows, n) = last_axis(v.shape()).ok_or_else(|| {
                    self.shape_err(idx, format!("log_softmax on shape {:?}", v.shape()))
                })?;
                let mut data = vec![0.0; v.numel()];
                for r in 0..rows {
                    let row = &v.data()[r * n..(r + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let log_denom = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    for j in 0..n {
                        data[r * n + j] = row[j] - max - log_denom;
                    }
                }
                Tensor::new(v.shape().to_vec(), data).expect("sized")
            }
            Op::EmbedMean { table, ids } => {
                let t = self.value(*table);
                let (v, d) = t.dims2().ok_or_else(|| {
                    self.shape_err(idx, format!("embedding table must be rank 2, got {:?}", t.shape()))
                })?;
                let mut data = vec![0.0; ids.len() * d];
                for (row, list) in ids.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    for &tok in list {
                        if tok >= v {
                            return Err(self.shape_err(
                                idx,
                                format!("token id {tok} out of table with {v} rows"),
                            ));
                        }
                        for j in 0..d {
                            data[row * d + j] += t.data()[tok * d + j];
                        }
                    }
                    let inv = 1.0 / list.len() as f64;
                    for j in 0..d {
                        data[row * d + j] *= inv;
                    }
                }
                Tensor::new(vec![ids.len(), d], data).expect("sized")
            }
        };
        if !value.all_finite() {
            return Err(GraphError::NonFinite {
                node: idx,
                op: self.nodes[idx].op.name(),
            });
        }
        Ok(value)
    }

    /// Accumulate `delta` into the gradient slot of `id`.
    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduce an output-shaped gradient back to an operand's shape.
    fn reduce_to(&self, grad: &Tensor, operand: &Tensor) -> Tensor {
        if grad.shape() == operand.shape() {
            return grad.clone();
        }
        if operand.is_scalar() {
            let mut out = operand.zeros_like();
            out.data_mut()[0] = grad.data().iter().sum();
            return out;
        }
        // Row broadcast [1, n]: column sums.
        let (m, n) = grad.dims2().expect("row broadcast implies rank 2");
        let mut out = operand.zeros_like();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j] += grad.data()[i * n + j];
            }
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Param | Op::Input | Op::Const => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, self.reduce_to(g, self.value(*a)));
                Self::accumulate(grads, *b, self.reduce_to(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, self.reduce_to(g, self.value(*a)));
                let neg = self.unary(g, |v| -v);
                Self::accumulate(grads, *b, self.reduce_to(&neg, self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = self
                    .elementwise(idx, g, bv, |x, y| x * y)
                    .expect("shapes validated in forward");
                Self::accumulate(grads, *a, self.reduce_to(&ga, av));
                let gb = self
                    .elementwise(idx, g, av, |x, y| x * y)
                    .expect("shapes validated in forward");
                Self::accumulate(grads, *b, self.reduce_to(&gb, bv));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("validated");
                let (_, n) = bv.dims2().expect("validated");
                let ga = Tensor::new(vec![m, k], matmul_nt(g.data(), bv.data(), m, n, k))
                    .expect("sized");
                Self::accumulate(grads, *a, ga);
                let gb = Tensor::new(vec![k, n], matmul_tn(av.data(), g.data(), m, k, n))
                    .expect("sized");
                Self::accumulate(grads, *b, gb);
            }
            Op::Concat(parts) => match self.value(NodeId(idx)).rank() {
                1 => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        let part = Tensor::new(vec![len], g.data()[offset..offset + len].to_vec())
                            .expect("sized");
                        Self::accumulate(grads, *p, part);
                        offset += len;
                    }
                }
                _ => {
                    let (m, total) = self.value(NodeId(idx)).dims2().expect("rank 2");
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = self.value(*p).dims2().expect("rank 2");
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        Self::accumulate(grads, *p, Tensor::new(vec![m, w], data).expect("sized"));
                        offset += w;
                    }
                }
            },
            Op::RowSlice { input, start, rows: _ } => {
                let v = self.value(*input);
                let mut out = v.zeros_like();
                match v.shape() {
                    [_] => {
                        for (j, gv) in g.data().iter().enumerate() {
                            out.data_mut()[start + j] = *gv;
                        }
                    }
                    [_, n] => {
                        let base = start * n;
                        for (j, gv) in g.data().iter().enumerate() {
                            out.data_mut()[base + j] = *gv;
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                Self::accumulate(grads, *input, out);
            }
            Op::Column { input, col } => {
                let v = self.value(*input);
                let (m, n) = v.dims2().expect("validated");
                let mut out = v.zeros_like();
                for i in 0..m {
                    out.data_mut()[i * n + col] = g.data()[i];
                }
                Self::accumulate(grads, *input, out);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let mut out = xv.zeros_like();
                for i in 0..out.numel() {
                    out.data_mut()[i] = g.data()[i] * abs_subgradient(xv.data()[i]);
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let scale = g.item() / xv.numel() as f64;
                let mut out = xv.zeros_like();
                for v in out.data_mut() {
                    *v = scale;
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Neg(x) => {
                Self::accumulate(grads, *x, self.unary(g, |v| -v));
            }
            Op::Scale(x, c) => {
                let c = *c;
                Self::accumulate(grads, *x, self.unary(g, move |v| c * v));
            }
            Op::Elu(x) => {
                let xv = self.value(*x);
                let mut out = xv.zeros_like();
                for i in 0..out.numel() {
                    out.data_mut()[i] = g.data()[i] * elu_deriv(xv.data()[i]);
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Sigmoid(x) => {
                let s = self.value(NodeId(idx));
                let mut out = s.zeros_like();
                for i in 0..out.numel() {
                    let sv = s.data()[i];
                    out.data_mut()[i] = g.data()[i] * sv * (1.0 - sv);
                }
                Self::accumulate(grads, *x, out);
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x);
                let mut out = xv.zeros_like();
                for i in 0..out.numel() {
                    out.data_mut()[i] = g.data()[i] * stable_sigmoid(-xv.data()[i]);
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Exp(x) => {
                let ev = self.value(NodeId(idx));
                let mut out = ev.zeros_like();
                for i in 0..out.numel() {
                    out.data_mut()[i] = g.data()[i] * ev.data()[i];
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let mut out = xv.zeros_like();
                for i in 0..out.numel() {
                    out.data_mut()[i] = g.data()[i] / xv.data()[i];
                }
                Self::accumulate(grads, *x, out);
            }
            Op::Softmax(x) => {
                let y = self.value(NodeId(idx));
                let (rows, n) = last_axis(y.shape()).expect("validated");
                let mut out = y.zeros_like();
                for r in 0..rows {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out.data_mut()[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *x, out);
            }
            Op::LogSoftmax(x) => {
                let y = self.value(NodeId(idx));
                let (rows, n) = last_axis(y.shape()).expect("validated");
                let mut out = y.zeros_like();
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        let softmax_j = y.data()[r * n + j].exp();
                        out.data_mut()[r * n + j] = gr[j] - softmax_j * gsum;
                    }
                }
                Self::accumulate(grads, *x, out);
            }
            Op::EmbedMean { table, ids } => {
                let t = self.value(*table);
                let (_, d) = t.dims2().expect("validated");
                let mut out = t.zeros_like();
                for (row, list) in ids.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / list.len() as f64;
                    for &tok in list {
                        for j in 0..d {
                            out.data_mut()[tok * d + j] += g.data()[row * d + j] * inv;
                        }
                    }
                }
                Self::accumulate(grads, *table, out);
            }
        }
    }
}
