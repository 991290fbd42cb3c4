//! Named parameter storage shared between model construction, the graph,
//! optimizers, and checkpoints.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::{Element, Graph, TensorId};

/// Resolves parameter names to tensors. Lets a model forward pass run
/// against plain maps or composite views (e.g. a teacher map with the
/// object queries borrowed from the student).
pub trait ParamSource<F: Element> {
    fn fetch(&self, name: &str) -> Option<&ArrayD<F>>;
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMap<F: Element> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Element> ParamMap<F> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.map.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<F>) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape mismatch for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

impl<F: Element> Default for ParamMap<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> ParamSource<F> for ParamMap<F> {
    fn fetch(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }
}

/// Binds parameters from a [`ParamSource`] into a graph, caching ids so a
/// parameter referenced twice shares one leaf node.
pub struct Binder<'a, F: Element> {
    source: &'a dyn ParamSource<F>,
    bound: BTreeMap<String, TensorId>,
}

impl<'a, F: Element> Binder<'a, F> {
    pub fn new(source: &'a dyn ParamSource<F>) -> Self {
        Self { source, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph<F>, name: &str) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self
            .source
            .fetch(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from source"))
            .clone();
        let id = g.param(name, value);
        self.bound.insert(name.to_string(), id);
        id
    }
}
