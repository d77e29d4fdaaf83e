//! Wengert-list tape: eager forward evaluation, reverse-mode gradients.

use crate::autodiff::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids are dense and increase in the order
/// nodes were recorded, which is also the topological order of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operation set.
///
/// Every op maps one or more 2-D tensors to a 2-D tensor. Elementwise ops
/// preserve shape; `Sum` and `Mean` reduce to 1x1; the structural ops
/// (`ConcatCols`, `SliceCols`, `BroadcastRow`) rearrange columns or rows.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise `a + b`; shapes must match.
    Add,
    /// Elementwise `a - b`; shapes must match.
    Sub,
    /// Elementwise (Hadamard) `a * b`; shapes must match.
    Mul,
    /// Matrix product `(r x k) * (k x c)`.
    MatMul,
    /// `x` where positive, `slope * x` otherwise. `slope = 0` is ReLU,
    /// `slope = -1` is an absolute-value gadget, `slope = 1` is identity.
    LeakyRelu { slope: f64 },
    Tanh,
    Exp,
    /// Natural log; the forward pass rejects non-positive inputs.
    Log,
    Square,
    /// Sum of all entries, producing a 1x1 tensor.
    Sum,
    /// Mean of all entries, producing a 1x1 tensor.
    Mean,
    /// `k * x` for a compile-time constant `k` (not a tape node).
    ScalarMul { k: f64 },
    /// Concatenate inputs left-to-right; all must share a row count.
    ConcatCols,
    /// Keep columns `start..end` (end exclusive).
    SliceCols { start: usize, end: usize },
    /// Repeat a `1 x c` row vector into `rows x c`.
    BroadcastRow { rows: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ScalarMul { .. } => "scalar_mul",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::BroadcastRow { .. } => "broadcast_row",
        }
    }
}

struct Node {
    /// `None` for leaves (inputs and parameters).
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of one scalar root with respect to every tape node.
///
/// Registered parameters always carry a tensor (zeros if the root does not
/// depend on them); other nodes unreachable from the root report `None`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node that is known to have one (e.g. a parameter).
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("no gradient recorded for node")
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// A linear record of tensor operations.
///
/// Values are computed eagerly as ops are recorded, so any node's value can
/// be inspected immediately. [`Tape::backward`] then walks the record once in
/// reverse id order, accumulating adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
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

    /// Record a constant input. No gradient is retained for leaves unless the
    /// root actually reaches them.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(None, Vec::new(), value)
    }

    /// Record a trainable parameter; its gradient is always materialized.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(None, Vec::new(), value);
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Option<OpKind>, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record `op` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
        let out = forward(&op, &vals)?;
        Ok(self.push(Some(op), inputs.to_vec(), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.apply(OpKind::LeakyRelu { slope }, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn scalar_mul(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.apply(OpKind::ScalarMul { k }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceCols { start, end }, &[x])
    }

    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        self.apply(OpKind::BroadcastRow { rows }, &[x])
    }

    /// Reverse sweep from a 1x1 `root`.
    ///
    /// Nodes are visited strictly in decreasing id order, so the result is a
    /// pure function of the recorded program — re-running an identical tape
    /// yields bit-identical gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Operand {
                op: "backward",
                rows: rv.rows(),
                cols: rv.cols(),
                msg: "root of backward must be a 1x1 scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            match op {
                OpKind::Add => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g);
                }
                OpKind::Sub => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g.map(|v| -v));
                }
                OpKind::Mul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    accumulate(&mut grads, node.inputs[0], hadamard(&g, b));
                    accumulate(&mut grads, node.inputs[1], hadamard(&g, a));
                }
                OpKind::MatMul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    accumulate(&mut grads, node.inputs[0], mm_nt(&g, b));
                    accumulate(&mut grads, node.inputs[1], mm_tn(a, &g));
                }
                OpKind::LeakyRelu { slope } => {
                    let x = self.value(node.inputs[0]);
                    let s = *slope;
                    let d = zip_map(&g, x, |gv, xv| gv * if xv > 0.0 { 1.0 } else { s });
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Tanh => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Exp => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gv, yv| gv * yv);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Log => {
                    let x = self.value(node.inputs[0]);
                    let d = zip_map(&g, x, |gv, xv| gv / xv);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Square => {
                    let x = self.value(node.inputs[0]);
                    let d = zip_map(&g, x, |gv, xv| gv * 2.0 * xv);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Sum => {
                    let x = self.value(node.inputs[0]);
                    let d = Tensor::filled(x.rows(), x.cols(), g.item());
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::Mean => {
                    let x = self.value(node.inputs[0]);
                    let d = Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64);
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::ScalarMul { k } => {
                    let kk = *k;
                    accumulate(&mut grads, node.inputs[0], g.map(|v| kk * v));
                }
                OpKind::ConcatCols => {
                    let mut start = 0;
                    for &input in &node.inputs {
                        let w = self.value(input).cols();
                        let piece = slice_columns(&g, start, start + w);
                        accumulate(&mut grads, input, piece);
                        start += w;
                    }
                }
                OpKind::SliceCols { start, end: _ } => {
                    let x = self.value(node.inputs[0]);
                    let mut d = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            d.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], d);
                }
                OpKind::BroadcastRow { .. } => {
                    let mut d = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            d.set(0, j, d.get(0, j) + g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], d);
                }
            }
        }

        // Parameters the root never touched still deserve a (zero) gradient.
        for &p in &self.params {
            if grads[p.0].is_none() {
                let v = self.value(p);
                grads[p.0] = Some(Tensor::zeros(v.rows(), v.cols()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_raw(a.rows(), a.cols(), data)
}

fn slice_columns(x: &Tensor, start: usize, end: usize) -> Tensor {
    let w = end - start;
    let mut data = Vec::with_capacity(x.rows() * w);
    for i in 0..x.rows() {
        data.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::from_raw(x.rows(), w, data)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: b.rows(),
            rhs_cols: b.cols(),
        });
    }
    Ok(())
}

fn arity(op: &OpKind, vals: &[&Tensor], expect: usize) -> Result<()> {
    if vals.len() != expect {
        return Err(Error::Operand {
            op: op.name(),
            rows: 0,
            cols: 0,
            msg: format!("expected {expect} operand(s), got {}", vals.len()),
        });
    }
    Ok(())
}

/// Evaluate one op. Shape errors are reported here so a malformed graph
/// fails at construction rather than at backward time.
fn forward(op: &OpKind, vals: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::Add => {
            arity(op, vals, 2)?;
            same_shape("add", vals[0], vals[1])?;
            Ok(zip_map(vals[0], vals[1], |a, b| a + b))
        }
        OpKind::Sub => {
            arity(op, vals, 2)?;
            same_shape("sub", vals[0], vals[1])?;
            Ok(zip_map(vals[0], vals[1], |a, b| a - b))
        }
        OpKind::Mul => {
            arity(op, vals, 2)?;
            same_shape("mul", vals[0], vals[1])?;
            Ok(hadamard(vals[0], vals[1]))
        }
        OpKind::MatMul => {
            arity(op, vals, 2)?;
            if vals[0].cols() != vals[1].rows() {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs_rows: vals[0].rows(),
                    lhs_cols: vals[0].cols(),
                    rhs_rows: vals[1].rows(),
                    rhs_cols: vals[1].cols(),
                });
            }
            Ok(mm_nn(vals[0], vals[1]))
        }
        OpKind::LeakyRelu { slope } => {
            arity(op, vals, 1)?;
            let s = *slope;
            Ok(vals[0].map(|v| if v > 0.0 { v } else { s * v }))
        }
        OpKind::Tanh => {
            arity(op, vals, 1)?;
            Ok(vals[0].map(f64::tanh))
        }
        OpKind::Exp => {
            arity(op, vals, 1)?;
            Ok(vals[0].map(f64::exp))
        }
        OpKind::Log => {
            arity(op, vals, 1)?;
            let x = vals[0];
            if let Some(v) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Numerical(format!(
                    "log of non-positive value {v}"
                )));
            }
            Ok(x.map(f64::ln))
        }
        OpKind::Square => {
            arity(op, vals, 1)?;
            Ok(vals[0].map(|v| v * v))
        }
        OpKind::Sum => {
            arity(op, vals, 1)?;
            Ok(Tensor::scalar(vals[0].data().iter().sum()))
        }
        OpKind::Mean => {
            arity(op, vals, 1)?;
            let x = vals[0];
            if x.is_empty() {
                return Err(Error::Operand {
                    op: "mean",
                    rows: x.rows(),
                    cols: x.cols(),
                    msg: "mean of an empty tensor".into(),
                });
            }
            Ok(Tensor::scalar(
                x.data().iter().sum::<f64>() / x.len() as f64,
            ))
        }
        OpKind::ScalarMul { k } => {
            arity(op, vals, 1)?;
            let kk = *k;
            Ok(vals[0].map(|v| kk * v))
        }
        OpKind::ConcatCols => {
            if vals.is_empty() {
                return Err(Error::Operand {
                    op: "concat_cols",
                    rows: 0,
                    cols: 0,
                    msg: "needs at least one operand".into(),
                });
            }
            let rows = vals[0].rows();
            for v in vals {
                if v.rows() != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs_rows: rows,
                        lhs_cols: vals[0].cols(),
                        rhs_rows: v.rows(),
                        rhs_cols: v.cols(),
                    });
                }
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for v in vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            Ok(Tensor::from_raw(rows, cols, data))
        }
        OpKind::SliceCols { start, end } => {
            arity(op, vals, 1)?;
            let x = vals[0];
            if *start >= *end || *end > x.cols() {
                return Err(Error::Operand {
                    op: "slice_cols",
                    rows: x.rows(),
                    cols: x.cols(),
                    msg: format!("column range {start}..{end} out of bounds"),
                });
            }
            Ok(slice_columns(x, *start, *end))
        }
        OpKind::BroadcastRow { rows } => {
            arity(op, vals, 1)?;
            let x = vals[0];
            if x.rows() != 1 {
                return Err(Error::Operand {
                    op: "broadcast_row",
                    rows: x.rows(),
                    cols: x.cols(),
                    msg: "only a 1 x c row vector can be broadcast".into(),
                });
            }
            if *rows == 0 {
                return Err(Error::Operand {
                    op: "broadcast_row",
                    rows: x.rows(),
                    cols: x.cols(),
                    msg: "target row count must be positive".into(),
                });
            }
            let mut data = Vec::with_capacity(rows * x.cols());
            for _ in 0..*rows {
                data.extend_from_slice(x.row(0));
            }
            Ok(Tensor::from_raw(*rows, x.cols(), data))
        }
    }
}
