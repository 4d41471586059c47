//! Reverse-mode autodiff on an append-only tape.
//!
//! Recording a computation appends one node per operation, each holding its
//! output tensor and parent indices; parents always have smaller indices, so
//! the node order is already topological. The node count doubles as the
//! memory proxy reported by the training diagnostics, and the stored-element
//! count gives the same comparison in units of saved activations.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::Tensor;
use super::value::Value;
use super::AdError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// New nodes may be appended.
    Recording,
    /// The graph is sealed; appending is an error, backward is allowed.
    Frozen,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ClampMin(usize, f64),
    Clamp(usize, f64, f64),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Relu(usize),
    StepPos,
    Gelu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    RowL2Norm(usize),
    RowDot(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    BroadcastRow { src: usize },
    BroadcastCol { src: usize },
    Reshape { src: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    frozen: bool,
}

/// Shared, interior-mutable recording context. Cloning is cheap and refers
/// to the same tape.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Map from trainable-leaf node id to gradient tensor. Every trainable leaf
/// on the tape appears, with a zero tensor if the loss never touched it.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_id: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.by_id.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_id.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Gradients for the given leaf ids, in the given order.
    pub fn ordered(&self, ids: &[usize]) -> Result<Vec<Tensor>, AdError> {
        ids.iter()
            .map(|id| {
                self.by_id.get(id).cloned().ok_or(AdError::InvalidArg {
                    op: "gradients",
                    msg: format!("node {id} is not a trainable leaf of this tape"),
                })
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mode(&self) -> TapeMode {
        if self.inner.borrow().frozen {
            TapeMode::Frozen
        } else {
            TapeMode::Recording
        }
    }

    /// Seals the tape; subsequent recording attempts error.
    pub fn freeze(&self) {
        self.inner.borrow_mut().frozen = true;
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Total number of stored value elements across all nodes.
    pub fn saved_elems(&self) -> u64 {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.value.numel() as u64)
            .sum()
    }

    /// Records a trainable leaf (a parameter).
    pub fn param(&self, value: Tensor) -> Result<Var, AdError> {
        self.push(Op::Leaf { trainable: true }, value)
    }

    /// Records a constant leaf (data, targets, anything detached).
    pub fn constant(&self, value: Tensor) -> Result<Var, AdError> {
        self.push(Op::Leaf { trainable: false }, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Result<Var, AdError> {
        let mut inner = self.inner.borrow_mut();
        if inner.frozen {
            return Err(AdError::FrozenTape { op: op_name(&op) });
        }
        inner.nodes.push(Node { op, value });
        Ok(Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn same_tape(&self, other: &Tape, op: &'static str) -> Result<(), AdError> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(AdError::CrossTape { op })
        }
    }

    /// Reverse sweep from a scalar root. Requires a frozen tape. Returns the
    /// gradient for every trainable leaf (zeros for leaves the root does not
    /// depend on). Traversal and accumulation order are fixed by node index,
    /// so repeated calls are bit-identical.
    pub fn backward(&self, root: &Var) -> Result<Gradients, AdError> {
        self.same_tape(&root.tape, "backward")?;
        let inner = self.inner.borrow();
        if !inner.frozen {
            return Err(AdError::TapeNotFrozen);
        }
        let nodes = &inner.nodes;
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(AdError::NotScalar {
                op: "backward",
                shape: root_val.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(root_val.shape().to_vec()));

        for id in (0..=root.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { .. } | Op::StepPos => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone())?;
                    accum(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone())?;
                    accum(&mut grads, *b, g.neg())?;
                }
                Op::Mul(a, b) => {
                    accum(&mut grads, *a, g.mul(&nodes[*b].value)?)?;
                    accum(&mut grads, *b, g.mul(&nodes[*a].value)?)?;
                }
                Op::Div(a, b) => {
                    let vb = &nodes[*b].value;
                    accum(&mut grads, *a, g.div(vb)?)?;
                    let db = g.mul(&nodes[*a].value)?.div(&vb.square())?.neg();
                    accum(&mut grads, *b, db)?;
                }
                Op::Scale(a, k) => accum(&mut grads, *a, g.scale(*k))?,
                Op::AddScalar(a) => accum(&mut grads, *a, g.clone())?,
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    let mask = nodes[*a].value.map(|v| if v > lo { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, g.mul(&mask)?)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mask = nodes[*a]
                        .value
                        .map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, g.mul(&mask)?)?;
                }
                Op::Square(a) => {
                    accum(&mut grads, *a, g.mul(&nodes[*a].value.scale(2.0))?)?;
                }
                Op::Sqrt(a) => {
                    let d = node.value.map(|v| 0.5 / v);
                    accum(&mut grads, *a, g.mul(&d)?)?;
                }
                Op::Exp(a) => accum(&mut grads, *a, g.mul(&node.value)?)?,
                Op::Log(a) => accum(&mut grads, *a, g.div(&nodes[*a].value)?)?,
                Op::Sin(a) => accum(&mut grads, *a, g.mul(&nodes[*a].value.cos())?)?,
                Op::Cos(a) => {
                    accum(&mut grads, *a, g.mul(&nodes[*a].value.sin())?.neg())?;
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|v| 1.0 - v * v);
                    accum(&mut grads, *a, g.mul(&d)?)?;
                }
                Op::Relu(a) => {
                    accum(&mut grads, *a, g.mul(&nodes[*a].value.step_pos())?)?;
                }
                Op::Gelu(a) => {
                    accum(&mut grads, *a, g.mul(&nodes[*a].value.gelu_prime())?)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&nodes[*b].value.transpose()?)?;
                    accum(&mut grads, *a, da)?;
                    let db = nodes[*a].value.transpose()?.matmul(&g)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.transpose()?)?,
                Op::Sum(a) => {
                    let gv = g.scalar_value()?;
                    accum(&mut grads, *a, Tensor::full(nodes[*a].value.shape().to_vec(), gv))?;
                }
                Op::Mean(a) => {
                    let va = &nodes[*a].value;
                    let gv = g.scalar_value()? / va.numel() as f64;
                    accum(&mut grads, *a, Tensor::full(va.shape().to_vec(), gv))?;
                }
                Op::RowL2Norm(a) => {
                    let va = &nodes[*a].value;
                    let norms = node.value.data();
                    let (b, d) = va.dims2("row_l2norm_grad")?;
                    let mut out = vec![0.0; b * d];
                    for i in 0..b {
                        // Zero subgradient for an exactly zero row.
                        let coeff = if norms[i] > 0.0 { g.data()[i] / norms[i] } else { 0.0 };
                        for j in 0..d {
                            out[i * d + j] = coeff * va.data()[i * d + j];
                        }
                    }
                    accum(&mut grads, *a, Tensor::from_raw(vec![b, d], out))?;
                }
                Op::RowDot(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let (rows, d) = va.dims2("row_dot_grad")?;
                    let gb = g.broadcast_col(d)?;
                    let _ = rows;
                    accum(&mut grads, *a, gb.mul(vb)?)?;
                    accum(&mut grads, *b, gb.mul(va)?)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let (_, w) = nodes[p].value.dims2("concat_grad")?;
                        accum(&mut grads, p, g.slice_cols(offset, offset + w)?)?;
                        offset += w;
                    }
                }
                Op::SliceCols { src, start } => {
                    let vs = &nodes[*src].value;
                    let (rows, cols) = vs.dims2("slice_grad")?;
                    let (_, w) = g.dims2("slice_grad")?;
                    let mut out = vec![0.0; rows * cols];
                    for i in 0..rows {
                        out[i * cols + start..i * cols + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accum(&mut grads, *src, Tensor::from_raw(vec![rows, cols], out))?;
                }
                Op::BroadcastRow { src } => {
                    let (rows, n) = g.dims2("broadcast_row_grad")?;
                    let mut out = vec![0.0; n];
                    for i in 0..rows {
                        for j in 0..n {
                            out[j] += g.data()[i * n + j];
                        }
                    }
                    accum(&mut grads, *src, Tensor::from_raw(vec![n], out))?;
                }
                Op::BroadcastCol { src } => {
                    let (b, cols) = g.dims2("broadcast_col_grad")?;
                    let mut out = vec![0.0; b];
                    for i in 0..b {
                        out[i] = g.data()[i * cols..(i + 1) * cols].iter().sum();
                    }
                    accum(&mut grads, *src, Tensor::from_raw(vec![b], out))?;
                }
                Op::Reshape { src } => {
                    let shape = nodes[*src].value.shape().to_vec();
                    accum(&mut grads, *src, g.reshape(shape)?)?;
                }
            }
        }

        let mut by_id = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                by_id.insert(id, g);
            }
        }
        Ok(Gradients { by_id })
    }
}

fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<(), AdError> {
    grads[id] = Some(match grads[id].take() {
        None => delta,
        Some(g) => g.add(&delta)?,
    });
    Ok(())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ClampMin(..) => "clamp_min",
        Op::Clamp(..) => "clamp",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::StepPos => "step_pos",
        Op::Gelu(..) => "gelu",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::RowL2Norm(..) => "row_l2norm",
        Op::RowDot(..) => "row_dot",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::BroadcastRow { .. } => "broadcast_row",
        Op::BroadcastCol { .. } => "broadcast_col",
        Op::Reshape { .. } => "reshape",
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Result<Var, AdError> {
        self.tape.push(op, value)
    }

    fn binary(&self, other: &Var, op: &'static str) -> Result<(), AdError> {
        self.tape.same_tape(&other.tape, op)
    }
}

impl Value for Var {
    fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn to_tensor(&self) -> Tensor {
        self.value()
    }

    fn lift(&self, t: &Tensor) -> Result<Self, AdError> {
        self.tape.constant(t.clone())
    }

    fn detach(&self) -> Result<Self, AdError> {
        self.tape.constant(self.value())
    }

    fn add(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "add")?;
        let v = self.value().add(&other.value())?;
        self.unary(v, Op::Add(self.id, other.id))
    }

    fn sub(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "sub")?;
        let v = self.value().sub(&other.value())?;
        self.unary(v, Op::Sub(self.id, other.id))
    }

    fn mul(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "mul")?;
        let v = self.value().mul(&other.value())?;
        self.unary(v, Op::Mul(self.id, other.id))
    }

    fn div(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "div")?;
        let v = self.value().div(&other.value())?;
        self.unary(v, Op::Div(self.id, other.id))
    }

    fn scale(&self, k: f64) -> Result<Self, AdError> {
        let v = self.value().scale(k);
        self.unary(v, Op::Scale(self.id, k))
    }

    fn add_scalar(&self, k: f64) -> Result<Self, AdError> {
        let v = self.value().add_scalar(k);
        self.unary(v, Op::AddScalar(self.id))
    }

    fn clamp_min(&self, lo: f64) -> Result<Self, AdError> {
        let v = self.value().clamp_min(lo);
        self.unary(v, Op::ClampMin(self.id, lo))
    }

    fn clamp(&self, lo: f64, hi: f64) -> Result<Self, AdError> {
        let v = self.value().clamp(lo, hi)?;
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    fn square(&self) -> Result<Self, AdError> {
        let v = self.value().square();
        self.unary(v, Op::Square(self.id))
    }

    fn sqrt(&self) -> Result<Self, AdError> {
        let v = self.value().sqrt();
        self.unary(v, Op::Sqrt(self.id))
    }

    fn exp(&self) -> Result<Self, AdError> {
        let v = self.value().exp();
        self.unary(v, Op::Exp(self.id))
    }

    fn log(&self) -> Result<Self, AdError> {
        let v = self.value().log();
        self.unary(v, Op::Log(self.id))
    }

    fn sin(&self) -> Result<Self, AdError> {
        let v = self.value().sin();
        self.unary(v, Op::Sin(self.id))
    }

    fn cos(&self) -> Result<Self, AdError> {
        let v = self.value().cos();
        self.unary(v, Op::Cos(self.id))
    }

    fn tanh(&self) -> Result<Self, AdError> {
        let v = self.value().tanh();
        self.unary(v, Op::Tanh(self.id))
    }

    fn relu(&self) -> Result<Self, AdError> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.id))
    }

    fn step_pos(&self) -> Result<Self, AdError> {
        let v = self.value().step_pos();
        self.unary(v, Op::StepPos)
    }

    fn gelu(&self) -> Result<Self, AdError> {
        let v = self.value().gelu();
        self.unary(v, Op::Gelu(self.id))
    }

    fn matmul(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "matmul")?;
        let v = self.value().matmul(&other.value())?;
        self.unary(v, Op::MatMul(self.id, other.id))
    }

    fn transpose(&self) -> Result<Self, AdError> {
        let v = self.value().transpose()?;
        self.unary(v, Op::Transpose(self.id))
    }

    fn sum(&self) -> Result<Self, AdError> {
        let v = self.value().sum();
        self.unary(v, Op::Sum(self.id))
    }

    fn mean(&self) -> Result<Self, AdError> {
        let v = self.value().mean()?;
        self.unary(v, Op::Mean(self.id))
    }

    fn row_l2norm(&self) -> Result<Self, AdError> {
        let v = self.value().row_l2norm()?;
        self.unary(v, Op::RowL2Norm(self.id))
    }

    fn row_dot(&self, other: &Self) -> Result<Self, AdError> {
        self.binary(other, "row_dot")?;
        let v = self.value().row_dot(&other.value())?;
        self.unary(v, Op::RowDot(self.id, other.id))
    }

    fn concat_cols(parts: &[&Self]) -> Result<Self, AdError> {
        let first = parts.first().ok_or(AdError::EmptyInput { op: "concat_cols" })?;
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            first.binary(p, "concat_cols")?;
            ids.push(p.id);
        }
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let v = Tensor::concat_cols(&refs)?;
        first.tape.push(Op::ConcatCols(ids), v)
    }

    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError> {
        let v = self.value().slice_cols(start, end)?;
        self.unary(v, Op::SliceCols { src: self.id, start })
    }

    fn broadcast_row(&self, rows: usize) -> Result<Self, AdError> {
        let v = self.value().broadcast_row(rows)?;
        self.unary(v, Op::BroadcastRow { src: self.id })
    }

    fn broadcast_col(&self, cols: usize) -> Result<Self, AdError> {
        let v = self.value().broadcast_col(cols)?;
        self.unary(v, Op::BroadcastCol { src: self.id })
    }

    fn reshape(&self, shape: Vec<usize>) -> Result<Self, AdError> {
        let v = self.value().reshape(shape)?;
        self.unary(v, Op::Reshape { src: self.id })
    }
}
