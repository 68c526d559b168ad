//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. Leaves carry the
//! `requires_grad` flag of the tensor they were created from; any node with
//! a tracked input is itself tracked, and [`Graph::backward`] only visits
//! tracked nodes. Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`] is called.

mod gradcheck;
mod ops;

pub use gradcheck::grad_check;
pub use ops::Elementwise;

use crate::layers::AttentionSaved;
use crate::tensor::{precision, Result, Tensor, TensorError};
use crate::timemix::kernel::Wkv7Saved;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Row layout of a packed batch: row `b * seq + t` holds token `t` of
/// sequence `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn new(batch: usize, seq: usize) -> Self {
        Self { batch, seq }
    }

    pub fn single(seq: usize) -> Self {
        Self { batch: 1, seq }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// In-sequence position of every packed row.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.seq).collect()
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    L2NormRows { x: Var, eps: f64, norms: Vec<f64> },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<f64> },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    BroadcastRows(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, head_dim: usize, positions: Vec<usize>, theta: f64 },
    TokenShift { x: Var, layout: SeqLayout },
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    StraightThrough { sink: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    KlDiv { student: Var, teacher_probs: Vec<f64>, student_probs: Vec<f64> },
    Attention(Box<AttentionSaved>),
    Wkv7(Box<Wkv7Saved>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::L2NormRows { .. } => "rows_l2_normalize",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Embedding { .. } => "embedding",
            Op::Rope { .. } => "rope",
            Op::TokenShift { .. } => "token_shift",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowNorms(..) => "row_norms",
            Op::StraightThrough { .. } => "straight_through",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Attention(..) => "causal_attention",
            Op::Wkv7(..) => "wkv7",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::BroadcastRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorms(a) => vec![*a],
            Op::L2NormRows { x, .. }
            | Op::LayerNormRows { x, .. }
            | Op::Rope { x, .. }
            | Op::TokenShift { x, .. } => vec![*x],
            Op::RmsNorm { x, gamma, .. } => vec![*x, *gamma],
            Op::Embedding { table, .. } => vec![*table],
            Op::StraightThrough { sink } => vec![*sink],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { student, .. } => vec![*student],
            Op::Attention(s) => vec![s.q, s.k, s.v],
            Op::Wkv7(s) => s.inputs().to_vec(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Summary of one recorded node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    pub id: usize,
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reject any operation whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeInfo {
                id,
                kind: n.op.kind(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                requires_grad: n.value.requires_grad,
            })
            .collect()
    }

    /// Records a leaf; it is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// An untracked copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_raw(n.value.shape().to_vec(), g.clone()))
    }

    /// Clears every gradient slot, leaves included.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let kind = op.kind();
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad);
        let data = crate::tensor::round_buf(data);
        if self.check_finite {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: kind, index });
            }
        }
        let value = Tensor::from_raw(shape, data).with_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].value.requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &gout)?;
            self.nodes[id].grad = Some(gout);
            for (var, g) in contributions {
                if self.nodes[var.0].value.requires_grad {
                    self.accumulate(var, g);
                }
            }
        }
        let prec = precision();
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                for v in g.iter_mut() {
                    *v = prec.round(*v);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, g: Vec<f64>) {
        let slot = &mut self.nodes[var.0].grad;
        match slot {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        }
    }
}
