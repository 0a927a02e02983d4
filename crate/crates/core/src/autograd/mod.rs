//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with a closure that maps the output gradient to input gradients. Calling
//! [`Graph::backward`] walks the tape in reverse creation order.

mod check;
mod mlstm;
mod nn_ops;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use check::{check_gradients, check_gradients_in, numeric_gradient, GradCheckReport};
pub use mlstm::{mlstm_backward, mlstm_forward, MlstmDims, MlstmGrads, MlstmTrace};
pub use nn_ops::SparseMatrix;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Read-only view handed to backward closures.
pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    parents: &'a [usize],
    output: &'a Tensor<T>,
}

impl<'a, T> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        &self.nodes[self.parents[i]].value
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.output
    }

    pub fn needs(&self, i: usize) -> bool {
        self.nodes[self.parents[i]].requires_grad
    }
}

/// Recording context for one forward pass.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph that records backward closures for trainable parameters.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// Graph for evaluation: values only, nothing is retained for backward.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    /// Parameter-free graph, for differentiating plain functions of leaves.
    pub fn standalone() -> Self {
        Self::build(None, true)
    }

    fn build(params: Option<&'p ParamStore<T>>, grad_enabled: bool) -> Self {
        Self { params, nodes: RefCell::new(Vec::new()), param_nodes: RefCell::new(HashMap::new()), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params.expect("graph has no parameter store")
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push_leaf(value, false);
        Var { g: self, id }
    }

    /// Input that receives a gradient (used by gradient checks and tests).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let grad = self.grad_enabled;
        let id = self.push_leaf(value, grad);
        Var { g: self, id }
    }

    /// Trainable parameter. Repeated lookups return the same node so gradients
    /// from every use accumulate.
    pub fn param(&self, pid: ParamId) -> Var<'_, T> {
        if let Some(&id) = self.param_nodes.borrow().get(&pid) {
            return Var { g: self, id };
        }
        let value = self.params().value(pid).clone();
        let grad = self.grad_enabled;
        let id = self.push_leaf(value, grad);
        self.param_nodes.borrow_mut().insert(pid, id);
        Var { g: self, id }
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), backward: None, requires_grad });
        nodes.len() - 1
    }

    pub(crate) fn push_op(&self, value: Tensor<T>, parents: &[usize], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| nodes[p].requires_grad);
        let node = if requires_grad {
            Node { value: Rc::new(value), parents: parents.to_vec(), backward: Some(backward), requires_grad }
        } else {
            Node { value: Rc::new(value), parents: Vec::new(), backward: None, requires_grad }
        };
        nodes.push(node);
        Var { g: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root seeded with gradient 1.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let seed = Tensor::ones(root.shape());
        self.backward_with(root, seed)
    }

    /// Reverse pass with an explicit seed gradient for `root`.
    pub fn backward_with(&self, root: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        assert!(std::ptr::eq(root.g as *const _ as *const u8, self as *const _ as *const u8));
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads, param_nodes: self.param_nodes.borrow().clone() };
        }
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let ctx = BackwardCtx { nodes: &nodes, parents: &node.parents, output: &node.value };
            let parent_grads = bw(&ctx, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads, param_nodes: self.param_nodes.borrow().clone() }
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; `None` when the parameter was unused or no
    /// path connected it to the root.
    pub fn param(&self, pid: ParamId) -> Option<&Tensor<T>> {
        self.param_nodes.get(&pid).and_then(|&id| self.grads[id].as_ref())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) g: &'g Graph<'g, T>,
    pub(crate) id: usize,
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<'g, T> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.g.nodes.borrow()[self.id].value.dim(axis)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires_grad(self.id)
    }
}

impl<'g, T: Scalar> std::fmt::Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
