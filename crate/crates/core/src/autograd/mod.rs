//! Reverse-mode differentiation over a linear tape of dense `f64` tensors.
//!
//! Every forward operation appends a node holding its value and a backward
//! rule. [`Tape::backward`] walks the nodes once in reverse order. Nodes are
//! appended after their inputs, so the tape is topologically ordered by
//! construction.
//!
//! Policy: `backward` may be called more than once; each call discards the
//! previous gradients and recomputes them. New operations may be appended
//! after a backward pass.

mod backward;
pub(crate) mod kernels;
mod ops;

pub use ops::ConvSpec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection in harness tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    AddCol,
    MulCol,
    Scale,
    AddScalar,
    Reshape,
    SliceCols,
    ConcatCols,
    ConcatRows,
    GatherRows,
    Standardize,
    MaskedSoftmax,
    Gelu,
    Relu,
    Sigmoid,
    LnClamped,
    MaxRows,
    MeanRows,
    Sum,
    Conv2d,
    StraightThrough,
    Focal,
    GIoU,
    L1,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::AddCol => "add_col",
            OpKind::MulCol => "mul_col",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Reshape => "reshape",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::Standardize => "standardize",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LnClamped => "ln",
            OpKind::MaxRows => "max_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::Conv2d => "conv2d",
            OpKind::StraightThrough => "straight_through",
            OpKind::Focal => "focal_loss",
            OpKind::GIoU => "giou_loss",
            OpKind::L1 => "l1_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, MatMul, Transpose, Add, Sub, Mul, AddRow, MulRow, AddCol, MulCol, Scale,
            AddScalar, Reshape, SliceCols, ConcatCols, ConcatRows, GatherRows, Standardize,
            MaskedSoftmax, Gelu, Relu, Sigmoid, LnClamped, MaxRows, MeanRows, Sum, Conv2d,
            StraightThrough, Focal, GIoU, L1,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Option<Var>,
        scales: Vec<kernels::RowScale>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LnClamped {
        x: Var,
        floor: f64,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: kernels::ConvGeom,
        cols: Vec<f64>,
    },
    StraightThrough(Var),
    /// Losses whose gradient w.r.t. the single input is computed in the forward pass.
    LossWithGrad {
        kind: OpKind,
        x: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::AddCol(..) => OpKind::AddCol,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Standardize { .. } => OpKind::Standardize,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LnClamped { .. } => OpKind::LnClamped,
            Op::MaxRows { .. } => OpKind::MaxRows,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::StraightThrough(..) => OpKind::StraightThrough,
            Op::LossWithGrad { kind, .. } => *kind,
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Recorded computation. Confined to one execution context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<(OpKind, f64)>,
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

    /// Forgets every node recorded after the first `len`, so a long-lived
    /// tape can be reused for repeated forward passes over the same leaves.
    /// Vars pointing past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass' loss with respect to `v`.
    ///
    /// `None` when `v` does not require grad; a zero tensor when it does but
    /// the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let data = self
            .grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
        Some(Tensor::new(shape, data).expect("gradient matches value shape"))
    }

    /// Scales every input gradient produced by `kind` by `factor` in later
    /// backward passes. Harness self-tests use this to corrupt a rule on purpose.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    /// Populates gradients of the scalar `loss` for every node requiring grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                let fault = match self.fault {
                    Some((kind, f)) if kind == node.op.kind() => Some(f),
                    _ => None,
                };
                backward::propagate(&self.nodes, i, &g, &mut grads, fault);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Adds `src` into the gradient slot of `v`, allocating it on first use.
pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}
