use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::ops::PrimOp;
use crate::tensor::Tensor;
use crate::{NdError, Result, Scalar};

/// Fused operation with a hand-written backward pass.
///
/// `backward` receives the detached input values, the forward output, and the
/// upstream gradient; it returns one gradient per input (`None` for inputs
/// that need no gradient).
pub trait CustomOp<S: Scalar>: 'static {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

pub(crate) enum NodeOp<S: Scalar> {
    Leaf,
    Prim(PrimOp),
    Custom(Rc<dyn CustomOp<S>>),
}

pub(crate) struct Node<S: Scalar> {
    pub op: NodeOp<S>,
    /// Detached input values (outputs of earlier nodes share their buffers).
    pub inputs: Vec<Tensor<S>>,
    /// Tape ids of the inputs; `None` marks constants.
    pub input_ids: Vec<Option<usize>>,
    /// Detached output value, kept for backward.
    pub output: Tensor<S>,
}

pub(crate) struct TapeInner<S: Scalar> {
    pub nodes: Vec<Node<S>>,
}

/// Recording of primitive operations in execution order.
///
/// The record order is a topological order by construction: every input node
/// precedes its consumers, so a single reverse sweep visits each node once.
pub struct Tape<S: Scalar = f64> {
    pub(crate) inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) struct NodeRef<S: Scalar> {
    pub tape: Tape<S>,
    pub id: usize,
    pub requires_grad: bool,
}

impl<S: Scalar> Clone for NodeRef<S> {
    fn clone(&self) -> Self {
        Self { tape: self.tape.clone(), id: self.id, requires_grad: self.requires_grad }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers a differentiable leaf. The returned tensor shares the
    /// buffer of `value` and participates in gradient computation.
    pub fn param(&self, value: Tensor<S>) -> Tensor<S> {
        let value = value.detach();
        let id = self.push(Node {
            op: NodeOp::Leaf,
            inputs: vec![],
            input_ids: vec![],
            output: value.clone(),
        });
        value.with_node(NodeRef { tape: self.clone(), id, requires_grad: true })
    }

    pub(crate) fn push(&self, node: Node<S>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn record(
        &self,
        op: NodeOp<S>,
        inputs: Vec<Tensor<S>>,
        input_ids: Vec<Option<usize>>,
        output: Tensor<S>,
    ) -> Tensor<S> {
        let id = self.push(Node { op, inputs, input_ids, output: output.clone() });
        output.with_node(NodeRef { tape: self.clone(), id, requires_grad: false })
    }

    /// Applies a fused operation: `output` is the caller-computed forward
    /// value, `op` provides the backward pass. Recording happens only when at
    /// least one input is traced.
    pub fn apply_custom(
        op: Rc<dyn CustomOp<S>>,
        inputs: &[&Tensor<S>],
        output: Tensor<S>,
    ) -> Result<Tensor<S>> {
        output.ensure_finite(op.name())?;
        let tape = match find_tape("custom", inputs)? {
            Some(t) => t,
            None => return Ok(output),
        };
        let input_vals: Vec<Tensor<S>> = inputs.iter().map(|t| t.detach()).collect();
        let input_ids: Vec<Option<usize>> =
            inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect();
        Ok(tape.record(NodeOp::Custom(op), input_vals, input_ids, output))
    }
}

/// Resolves the common tape of a set of operands, if any is traced.
pub(crate) fn find_tape<S: Scalar>(
    op: &'static str,
    inputs: &[&Tensor<S>],
) -> Result<Option<Tape<S>>> {
    let mut found: Option<Tape<S>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(existing) => {
                    if !existing.same_tape(&node.tape) {
                        return Err(NdError::TapeMismatch { op });
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Gradients keyed by tape node id, as returned by [`backward`].
pub struct Gradients<S: Scalar = f64> {
    by_id: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `t`, which must be a tensor
    /// attached to the tape the backward pass ran on.
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&Tensor<S>> {
        t.node.as_ref().and_then(|n| self.by_id.get(&n.id))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Reverse sweep over the tape from `loss`, which must be a scalar produced
/// on it. Returns gradients for every `requires_grad` leaf; the gradient of
/// the loss with respect to itself is 1.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<Gradients<S>> {
    let node = loss.node.as_ref().ok_or(NdError::Detached)?;
    if loss.numel() != 1 {
        return Err(NdError::NotScalar { shape: loss.shape().to_vec() });
    }
    let tape = node.tape.clone();
    let inner = tape.inner.borrow();
    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
    grads[node.id] = Some(vec![S::one()]);

    for id in (0..=node.id).rev() {
        let Some(grad_out) = grads[id].take() else { continue };
        let node = &inner.nodes[id];
        let input_grads: Vec<Option<Tensor<S>>> = match &node.op {
            NodeOp::Leaf => {
                // store back for collection below
                grads[id] = Some(grad_out);
                continue;
            }
            NodeOp::Prim(p) => {
                let g = Tensor::from_parts(node.output.shape().to_vec(), grad_out);
                p.backward(&node.inputs, &node.output, &g)?
            }
            NodeOp::Custom(c) => {
                let g = Tensor::from_parts(node.output.shape().to_vec(), grad_out);
                let gs = c.backward(&node.inputs, &node.output, &g)?;
                if gs.len() != node.inputs.len() {
                    return Err(NdError::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        c.name(),
                        gs.len(),
                        node.inputs.len()
                    )));
                }
                gs
            }
        };
        for (slot, g) in node.input_ids.iter().zip(input_grads) {
            let (Some(input_id), Some(g)) = (slot, g) else { continue };
            if g.shape() != inner.nodes[*input_id].output.shape() {
                return Err(NdError::ShapeMismatch {
                    op: "backward",
                    details: format!(
                        "gradient shape {:?} does not match input shape {:?}",
                        g.shape(),
                        inner.nodes[*input_id].output.shape()
                    ),
                });
            }
            match &mut grads[*input_id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(g.data().to_vec()),
            }
        }
    }

    let mut by_id = HashMap::new();
    for (id, g) in grads.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let node = &inner.nodes[id];
        if matches!(node.op, NodeOp::Leaf) {
            by_id.insert(id, Tensor::from_parts(node.output.shape().to_vec(), g));
        }
    }
    Ok(Gradients { by_id })
}

impl<S: Scalar> Tensor<S> {
    /// Convenience wrapper around [`backward`].
    pub fn backward(&self) -> Result<Gradients<S>> {
        backward(self)
    }
}
