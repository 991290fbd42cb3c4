//! The tape: nodes, forward values, and the reverse sweep.

use ndarray::{ArrayD, IxDyn};

use crate::Element;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(pub usize);

/// Backward closure: given the graph (for parent values), the gradient
/// flowing into this node, and the per-node gradient slots, accumulate
/// gradient contributions into the node's parents.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Graph<F>, &ArrayD<F>, &mut [Option<ArrayD<F>>])>;

pub(crate) struct Node<F: Element> {
    pub(crate) value: ArrayD<F>,
    pub(crate) backward: Option<BackwardFn<F>>,
}

pub struct Graph<F: Element> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) params: Vec<(String, TensorId)>,
    track: bool,
}

impl<F: Element> Graph<F> {
    /// A graph that records backward closures and supports [`Graph::backward`].
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), track: true }
    }

    /// A forward-only graph: ops skip building backward closures.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), track: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: TensorId) -> F {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Leaf node that never receives gradient bookkeeping of its own.
    pub fn constant(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, None)
    }

    pub fn constant_scalar(&mut self, x: F) -> TensorId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Leaf node registered under `name` so its gradient can be collected
    /// after the backward sweep.
    pub fn param(&mut self, name: &str, value: ArrayD<F>) -> TensorId {
        let id = self.push(value, None);
        self.params.push((name.to_string(), id));
        id
    }

    pub(crate) fn push(&mut self, value: ArrayD<F>, backward: Option<BackwardFn<F>>) -> TensorId {
        // every node value is kept in standard layout so reshapes and raw
        // slice access never hit stride surprises
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let id = TensorId(self.nodes.len());
        let backward = if self.track { backward } else { None };
        self.nodes.push(Node { value, backward });
        id
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// reachable from the root.
    pub fn backward(&self, root: TensorId) -> Gradients<F> {
        assert!(self.track, "backward() called on an inference graph");
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one());
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let g = if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().to_owned()
            };
            if let Some(back) = &self.nodes[id].backward {
                back(self, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Names and ids of the parameters bound to this graph, in bind order.
    pub fn bound_params(&self) -> &[(String, TensorId)] {
        &self.params
    }
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<F: Element> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros if the node did not contribute to the root.
    pub fn get_or_zeros(&self, graph: &Graph<F>, id: TensorId) -> ArrayD<F> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(graph.value(id).raw_dim()),
        }
    }

    /// Collect gradients of all bound parameters by name (zeros when a
    /// parameter did not receive gradient).
    pub fn param_grads(&self, graph: &Graph<F>) -> std::collections::BTreeMap<String, ArrayD<F>> {
        let mut out = std::collections::BTreeMap::new();
        for (name, id) in &graph.params {
            out.insert(name.clone(), self.get_or_zeros(graph, *id));
        }
        out
    }
}

/// Accumulate `delta` into the gradient slot of `id`.
pub(crate) fn accum<F: Element>(grads: &mut [Option<ArrayD<F>>], id: TensorId, delta: ArrayD<F>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}
