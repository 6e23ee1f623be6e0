//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles in execution
//! order. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates vector-Jacobian products into the leaves that asked for
//! gradients. First-order only.
//!
//! ```
//! use vidshadow::autodiff::Tape;
//! use vidshadow::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum_all();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0]);
//! ```

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Result, Tensor, TensorError};

pub type NodeId = usize;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates performed on this thread by matmuls and fused
/// attention kernels since the last reset.
pub fn mac_counter() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_counter() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn count_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// An op whose forward pass is computed outside the tape's primitive set.
///
/// `backward` returns one gradient per input, in input order, each shaped
/// like its input.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    SumAll(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Reshape(NodeId),
    Transpose(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Gather {
        input: NodeId,
        index: Vec<Option<usize>>,
    },
    Softmax(NodeId, usize),
    LogSumExp(NodeId),
    LayerNorm(NodeId, f64),
    L2Normalize(NodeId, f64),
    MatMul(NodeId, NodeId),
    Custom(Box<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::SumAll(..) => "sum_all",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::MatMul(..) => "matmul",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Single-threaded; distinct tapes may live
/// on distinct threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    sabotage: RefCell<Option<String>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of the named op's backward contribution. Exists only
    /// so gradient-check harnesses can prove they catch a broken rule.
    pub fn inject_wrong_sign(&self, op_name: &str) {
        *self.sabotage.borrow_mut() = Some(op_name.to_string());
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records the result of an externally computed op.
    pub fn custom<'t>(
        &'t self,
        op: Box<dyn CustomOp>,
        inputs: &[Var<'t>],
        output: Tensor,
    ) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(output, Op::Custom(op, ids), rg)
    }

    /// Reverse pass from a scalar `loss`. Every `requires_grad` leaf gets an
    /// entry in the result, zero if the loss does not depend on it.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss belongs to another tape"
        );
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let sabotage = self.sabotage.borrow().clone();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(id, g);
                continue;
            }
            let mut contribs = ops::vjp(&node.op, &nodes, &node.value, &g);
            if sabotage.as_deref() == Some(node.op.name()) {
                for (_, t) in contribs.iter_mut() {
                    *t = t.map(|x| -x);
                }
            }
            for (input, gi) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of a loss with respect to the tape's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    /// Gradient for a trainable leaf. Panics if `var` is not one.
    pub fn wrt(&self, var: &Var<'_>) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", var.id))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
