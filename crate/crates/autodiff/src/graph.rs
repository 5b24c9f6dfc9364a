use std::cell::RefCell;
use std::rc::Rc;

use crate::Tensor;

/// Backward rule of a node: receives the upstream gradient and, per parent,
/// whether that parent needs a gradient. Returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only tape of tensor operations.
///
/// Node ids are assigned in creation order, which is also a topological order,
/// so the reverse sweep simply walks ids downwards.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules. Values are identical to a
    /// recording tape; only memory and time differ.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
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

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), false)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id }
    }

    /// Records an operation. The backward rule is dropped without being stored
    /// when no parent needs a gradient.
    pub fn custom<'g, F>(&'g self, parents: &[Var<'g>], value: Tensor, backward: F) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                requires_grad: true,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node {
                value: Rc::new(value),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }
        };
        let id = self.push(node);
        Var { graph: self, id }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Tensor::ones(root.value().shape());
        self.backward_with(root, seed)
    }

    /// Reverse sweep with an explicit seed (vector-Jacobian product).
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape");
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Gradients of leaves after a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf_rc(self.value(), false)
    }

    pub(crate) fn same_graph(&self, other: &Var<'g>) {
        debug_assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }
}
