use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::{ParamStore, Real};

/// Values handed to a backward function.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: &'a [Arc<ArrayD<T>>],
    pub output: &'a ArrayD<T>,
    pub grad: &'a ArrayD<T>,
    /// Which inputs actually need a gradient.
    pub needs: &'a [bool],
}

/// Computes the gradient for every input of a node (in input order).
/// `None` means "no contribution".
pub type BackFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Real> {
    value: Arc<ArrayD<T>>,
    inputs: Vec<usize>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

/// A single-use tape. Build the forward pass through [`Tensor`] handles,
/// then call [`Graph::backward`] once on a scalar.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: ParamStore<T>,
    param_ids: RefCell<HashMap<String, usize>>,
    track: bool,
    leaves: RefCell<Leaves<T>>,
}

/// Constant and detached leaves in creation order, optionally replayed.
struct Leaves<T: Real> {
    seen: Vec<Arc<ArrayD<T>>>,
    replay: Option<Vec<Arc<ArrayD<T>>>>,
}

impl<T: Real> Graph<T> {
    /// Tape that records gradients for every parameter in `params`.
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::build(params, true)
    }

    /// Tape that records no backward information (prediction, evaluation).
    pub fn inference(params: &ParamStore<T>) -> Self {
        Self::build(params, false)
    }

    /// Inference tape whose constant and detached leaves take the values
    /// recorded by another tape ([`Graph::frozen_leaves`]), in creation order.
    ///
    /// Evaluating a perturbed parameter set this way holds every
    /// stop-gradient input at its base value, which is the function reverse
    /// mode differentiates. Panics if the forward pass creates leaves of a
    /// different count or shape.
    pub fn replaying(params: &ParamStore<T>, leaves: Vec<Arc<ArrayD<T>>>) -> Self {
        let g = Self::build(params, false);
        g.leaves.borrow_mut().replay = Some(leaves);
        g
    }

    /// Values of every constant and detached leaf created so far.
    pub fn frozen_leaves(&self) -> Vec<Arc<ArrayD<T>>> {
        self.leaves.borrow().seen.clone()
    }

    fn build(params: &ParamStore<T>, track: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            params: params.clone(),
            param_ids: RefCell::new(HashMap::new()),
            track,
            leaves: RefCell::new(Leaves { seen: Vec::new(), replay: None }),
        }
    }

    fn frozen_leaf(&self, value: Arc<ArrayD<T>>) -> Arc<ArrayD<T>> {
        let mut leaves = self.leaves.borrow_mut();
        let k = leaves.seen.len();
        let v = match &leaves.replay {
            Some(r) => {
                let v = r.get(k).unwrap_or_else(|| panic!("replay has no leaf {k}")).clone();
                assert_eq!(v.shape(), value.shape(), "replayed leaf {k} changed shape");
                v
            }
            None => value,
        };
        leaves.seen.push(v.clone());
        v
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf for a named parameter. Repeated lookups return the same node.
    ///
    /// Panics when the parameter does not exist; parameter names are fixed
    /// at model construction.
    pub fn param(&self, name: &str) -> Tensor<'_, T> {
        self.try_param(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_param(&self, name: &str) -> Option<Tensor<'_, T>> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Some(Tensor { g: self, id });
        }
        let value = self.params.get_shared(name)?;
        let id = self.push_node(value, Vec::new(), None, self.track);
        self.param_ids.borrow_mut().insert(name.to_string(), id);
        Some(Tensor { g: self, id })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        let value = self.frozen_leaf(Arc::new(value));
        let id = self.push_node(value, Vec::new(), None, false);
        Tensor { g: self, id }
    }

    /// Scalar constant.
    pub fn scalar(&self, value: T) -> Tensor<'_, T> {
        self.constant(ArrayD::from_elem(ndarray::IxDyn(&[]), value))
    }

    /// Leaf that receives a gradient without being a named parameter.
    pub fn input(&self, value: ArrayD<T>) -> Tensor<'_, T> {
        let id = self.push_node(Arc::new(value), Vec::new(), None, self.track);
        Tensor { g: self, id }
    }

    fn push_node(
        &self,
        value: Arc<ArrayD<T>>,
        inputs: Vec<usize>,
        backward: Option<BackFn<T>>,
        requires_grad: bool,
    ) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        nodes.len() - 1
    }

    /// Records an operation. The backward function is dropped when no input
    /// needs a gradient.
    pub fn op(&self, value: ArrayD<T>, inputs: &[Tensor<'_, T>], backward: BackFn<T>) -> Tensor<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let requires_grad = self.track && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = if requires_grad {
            self.push_node(Arc::new(value), ids, Some(backward), true)
        } else {
            self.push_node(Arc::new(value), Vec::new(), None, false)
        };
        Tensor { g: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: Tensor<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Arc<ArrayD<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[input].value.shape(),
                    "gradient shape mismatch for node {input}"
                );
                match &mut grads[input] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        let params = self.param_ids.borrow().clone();
        Gradients { grads, params }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
    params: HashMap<String, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, t: Tensor<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params
            .get(name)
            .and_then(|&id| self.grads[id].as_ref())
    }

    /// All parameter gradients that were reached by the sweep.
    pub fn into_params(mut self) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, id) in self.params {
            if let Some(g) = self.grads[id].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g, T: Real> {
    pub(crate) g: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<'g, T: Real> Tensor<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value().shape()[axis]
    }

    pub fn ndim(&self) -> usize {
        self.value().ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires_grad_of(self.id)
    }

    /// Value as a flat row-major vector.
    pub fn to_vec(&self) -> Vec<T> {
        self.value().iter().copied().collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().expect("non-empty")
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Tensor<'g, T> {
        let value = self.g.frozen_leaf(self.value());
        let id = self.g.push_node(value, Vec::new(), None, false);
        Tensor { g: self.g, id }
    }
}

impl<T: Real> fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor#{}{:?}", self.id, self.shape())
    }
}
