//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants, inputs, or parameters fetched from a [`ParamStore`]; parameters
//! flagged as frozen enter the tape as constants, so no gradient is ever
//! computed or stored for them.

mod attention;
mod conv;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

pub use attention::SlotBias;
pub use conv::ConvGeom;
pub use ops::{Unary, NO_ROW};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a recorded value, if it required one.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a trainable parameter; `None` for frozen or unused ones.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param
            .get(&id)
            .and_then(|&n| self.by_node[n].as_ref())
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param
            .iter()
            .filter_map(|(&p, &n)| self.by_node[n].as_ref().map(|g| (p, g)))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// Tape for inference: values only, nothing requires grad.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(t), false)
    }

    /// Input whose gradient should be tracked.
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(t), true)
    }

    /// Parameter leaf. Frozen parameters enter as constants. Repeated calls
    /// for the same id within one tape return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&n) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: n };
        }
        let p = store.get(id);
        let v = self.leaf(p.value_arc(), p.trainable());
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled && parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar (single-element) output.
    pub fn backward(&self, out: Var<'_, T>) -> Gradients<T> {
        let seed = {
            let v = self.value_of(out.id);
            assert_eq!(v.len(), 1, "backward expects a scalar output");
            Tensor::full(v.shape(), T::one())
        };
        self.backward_with(out, seed)
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[out.id].requires_grad {
            grads[out.id] = Some(seed);
        }
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
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
        Gradients {
            by_node: grads,
            by_param: self.param_nodes.borrow().clone(),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v.data()[0]
    }

    /// New var recorded on the same tape.
    pub(crate) fn derive(
        &self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        self.tape.push(value, &ids, backward)
    }
}
