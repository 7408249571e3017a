use std::sync::Arc;

use crate::error::{usage, Result};
use crate::fourier::{ForwardOperator, SamplingMask};
use crate::tensor::{Shape, Tensor};

/// Handle to a recorded value. Only meaningful on the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) shape: Shape,
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    /// tensor times a one-element variable
    MulScalar(usize, usize),
    Recip(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        k: usize,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumSquares(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Dft2(usize),
    Idft2(usize),
    Mask(usize, Arc<SamplingMask>),
    DcSolve {
        y: usize,
        z: usize,
        op: Arc<ForwardOperator>,
        lambda: f64,
        tol: f64,
        max_iter: usize,
    },
    SoftThreshold {
        x: usize,
        theta: usize,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Residual record of one conjugate-gradient solve made while recording or
/// differentiating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgRecord {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
    pub backward: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) cg_log: Vec<CgRecord>,
    /// Activation-region signature, recorded only when enabled.
    pub(crate) kinks: Option<Vec<u8>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables recording of piecewise-linear activation regions, used by
    /// `grad_check` to detect finite-difference stencils that cross a kink.
    pub fn record_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    pub(crate) fn kink_signature(&self) -> &[u8] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cg_log(&self) -> &[CgRecord] {
        &self.cg_log
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            shape,
        }
    }

    pub(crate) fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|i| self.nodes[*i].requires_grad)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.shape.len() != 1 {
            return Err(usage(format!("backward needs a scalar output, got {}", output.shape)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::scalar(1.0));
        let mut cg_log = Vec::new();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads, &mut cg_log);
        }
        Ok(Gradients { grads, cg_log })
    }
}

/// Gradients of one backward pass, indexed by the issuing tape's variables.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    cg_log: Vec<CgRecord>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(v.shape))
    }

    pub fn cg_log(&self) -> &[CgRecord] {
        &self.cg_log
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
