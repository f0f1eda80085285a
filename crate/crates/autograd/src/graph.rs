//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Because nodes are appended only after their inputs exist, a single
//! reverse sweep over the tape visits nodes in a valid topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Array;
use crate::scalar::Scalar;

/// Computes gradients for each parent given the output gradient and the
/// output value. The bool slice says which parents actually need one; entries
/// for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Array<T>, &Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Array<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        let id = self.push(Node { value: Rc::new(value), parents: vec![], backward: None, requires_grad: false });
        Var { graph: self, id }
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Array<T>) -> Var<'_, T> {
        let id = self.push(Node { value: Rc::new(value), parents: vec![], backward: None, requires_grad: true });
        Var { graph: self, id }
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Array::scalar(v))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Record an operation. `backward` is dropped when no parent needs a gradient.
    pub(crate) fn op(&self, value: Array<T>, parents: &[usize], backward: BackwardFn<T>) -> Var<'_, T> {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        let id = self.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// created with [`Graph::leaf`] that the loss depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, g);
                }
                Some(bw) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let pg = bw(&g, &node.value, &needs);
                    debug_assert_eq!(pg.len(), node.parents.len());
                    for ((&p, gp), need) in node.parents.iter().zip(pg).zip(&needs) {
                        if !need {
                            continue;
                        }
                        let Some(gp) = gp else { continue };
                        debug_assert_eq!(gp.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&gp),
                            slot => *slot = Some(gp),
                        }
                    }
                }
            }
        }
        Grads { map: leaves }
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Grads<T> {
    map: HashMap<usize, Array<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Array<T>> {
        self.map.get(&v.id)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Array<T>> {
        self.map.remove(&v.id)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Array<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }
}
