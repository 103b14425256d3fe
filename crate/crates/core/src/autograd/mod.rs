//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. Nodes are appended in evaluation order, so walking the tape
//! backwards is a valid topological order for [`Graph::backward`].
//!
//! Parameters come from a [`ParamStore`]; each parameter is materialised as a
//! single leaf per graph, so every use of a parameter within one forward pass
//! shares the same node (and accumulates into the same gradient).

mod conv;
mod ops;
pub(crate) mod scan;

use std::collections::{HashMap, HashSet};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use ops::Activation;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes input gradients from `(grad_out, inputs, output, needs_grad)`.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters, for free-standing computations.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            frozen: HashSet::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Marks parameters as constants for this graph. Must be called before
    /// the parameters are first used.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store.expect("graph has no parameter store")
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store();
        let trainable = store.is_trainable(id) && !self.frozen.contains(&id);
        let v = self.leaf(store.get(id).clone(), trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// The parameter node already created for `id`, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    /// Number of distinct parameter leaves materialised on this graph.
    pub fn param_leaf_count(&self) -> usize {
        self.param_vars.len()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Queues a new value for a buffer (e.g. running statistics); applied by
    /// the caller after the step via [`Graph::take_buffer_updates`].
    pub fn update_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from `root`, seeded with ones (a scalar loss gets 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape();
        grads[root.0] = Some(Tensor::full(root_shape, 1.0));
        let mut leaf_grads = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(f) = &node.backward else {
                leaf_grads.insert(Var(i), g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = f(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(id, v)| leaf_grads.get(v).map(|g| (*id, g.clone())))
            .collect();
        Gradients {
            leaves: leaf_grads,
            params,
        }
    }
}

/// Gradients of a backward pass, keyed by leaf.
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests;
