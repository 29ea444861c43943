//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every value produced during one forward pass. Nodes
//! that depend on a trainable input carry a backward closure; everything
//! else is a constant and costs nothing at backprop time. Frozen parameter
//! groups enter the tape as constants, so they never receive a gradient.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    trainable: Vec<ParamGroup>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Graph<T> {
    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Self::training(&[])
    }

    /// A tape on which parameters of `groups` are differentiable leaves.
    pub fn training(groups: &[ParamGroup]) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable: groups.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false, None)
    }

    /// A differentiable leaf not tied to a parameter store; gradients are
    /// read back with [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), true, None)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let trainable = self.trainable.contains(&store.group(id));
        self.push_leaf(store.get(id).clone(), trainable, Some(id))
    }

    /// Record an op output. `backward` is only invoked (and its closure only
    /// kept) when at least one parent requires a gradient.
    pub(crate) fn push_op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward = requires_grad.then(backward);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagate from a scalar (single-element) node.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[i]) {
                if node.requires_grad {
                    match params.get_mut(&pid) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            params.insert(pid, g.clone());
                        }
                    }
                }
            }
        }
        Gradients { by_node: grads, params }
    }
}

pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient of a store parameter, summed over every leaf
    /// that read it. `None` for frozen or unused parameters.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }
}
