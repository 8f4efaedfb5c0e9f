//! Eager reverse-mode tape. Every primitive records its inputs plus whatever
//! it needs for the backward rule; `grad` replays the records in reverse.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Environment toggle that turns on a finiteness check after every primitive.
pub const CHECK_FINITE_ENV: &str = "HYDRAMAMBA_CHECK_FINITE";

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward value is computed outside the tape. The tape
/// stores the output and calls `backward` with the incoming cotangent.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// One entry per input, in order. `None` means no gradient flows there.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Conv {
        x: Var,
        kernel: Var,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedGather {
        src: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        k: usize,
    },
    SegmentMean {
        x: Var,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    MeanPool {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Silu(..) => "silu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Conv { .. } => "conv1d",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::SegmentMean { .. } => "segment_mean",
            Op::MeanPool { .. } => "mean_pool",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DepthwiseConv { x, kernel } | Op::Conv { x, kernel } => vec![*x, *kernel],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Softplus(x)
            | Op::Silu(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::MeanPool { x, .. } => vec![*x],
            Op::WeightedGather { src, .. } => vec![*src],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let check = std::env::var(CHECK_FINITE_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false);
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: check,
        }
    }

    /// Force the per-primitive finiteness check on or off.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A trainable input: gradients flow to it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A constant input: no gradient is tracked.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|i| nodes[i.0].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Record a primitive computed outside the tape.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Cotangents of the scalar `loss` with respect to every node on the
    /// tape that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(contract(format!(
                "gradient requested of non-scalar loss with shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = super::ops::backward_rule(&nodes, node, &g);
            for (input, cot) in contributions {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&cot),
                    slot @ None => *slot = Some(cot),
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `loss` with respect to each of `wrt`, in order. Inputs
    /// that `loss` does not depend on get a zero gradient.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss)?;
        Ok(wrt.iter().map(|&v| g.get(v)).collect())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
