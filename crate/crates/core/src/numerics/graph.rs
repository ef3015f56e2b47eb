//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; the backward sweep walks it once in reverse.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Records values and, when gradients are enabled, the local backward rule of every op.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Vec<Tensor<T>>,
    bound: RefCell<Vec<Option<usize>>>,
    grad_enabled: bool,
    taps: RefCell<Option<Vec<(String, Tensor<T>)>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<T: Float> Graph<T> {
    /// Graph recording backward rules, with `params` available via [`Graph::param`].
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::build(params.tensors().to_vec(), true)
    }

    /// Forward-only graph; no backward closures are kept.
    pub fn no_grad(params: &ParamStore<T>) -> Self {
        Self::build(params.tensors().to_vec(), false)
    }

    /// Graph without any bound parameter store.
    pub fn standalone() -> Self {
        Self::build(Vec::new(), true)
    }

    fn build(params: Vec<Tensor<T>>, grad_enabled: bool) -> Self {
        let n = params.len();
        Graph {
            nodes: RefCell::new(Vec::new()),
            params,
            bound: RefCell::new(vec![None; n]),
            grad_enabled,
            taps: RefCell::new(None),
        }
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

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), self.grad_enabled, None)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), false, None)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_, T> {
        if let Some(node) = self.bound.borrow()[id.index()] {
            return Var { graph: self, id: node };
        }
        let v = self.leaf(self.params[id.index()].clone());
        self.bound.borrow_mut()[id.index()] = Some(v.id);
        v
    }

    /// Starts collecting values passed to [`Graph::tap`].
    pub fn enable_taps(&self) {
        *self.taps.borrow_mut() = Some(Vec::new());
    }

    pub fn tap(&self, name: impl FnOnce() -> String, v: Var<'_, T>) {
        if let Some(taps) = self.taps.borrow_mut().as_mut() {
            taps.push((name(), v.value()));
        }
    }

    pub fn take_taps(&self) -> Vec<(String, Tensor<T>)> {
        self.taps.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, requires_grad, backward });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Appends an op result. `backward` maps the output gradient to one optional
    /// gradient per parent, in the order given.
    pub(crate) fn op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push_node(value, ids, requires_grad, backward)
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on a no-grad graph".into()));
        }
        let nodes: Ref<'_, Vec<Node<T>>> = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", out.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads, bound: self.bound.borrow().clone() })
    }
}

/// Gradients of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient w.r.t. a node; `None` when it does not influence the output.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a node, zero-filled when it does not influence the output.
    pub fn wrt_or_zero(&self, v: Var<'_, T>) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound[id.index()].and_then(|n| self.grads[n].as_ref())
    }

    /// Per-parameter gradients aligned with the store; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        // y = sum(x*x + x)
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::ones(&[3]));
        let c = g.constant(Tensor::full(&[3], 2.0));
        let y = x.mul(c).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![2.0; 3]);
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let store = ParamStore::<f32>::default();
        let g = Graph::no_grad(&store);
        let x = g.leaf(Tensor::ones(&[1]));
        assert!(!x.requires_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let g = Graph::<f64>::standalone();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }
}
