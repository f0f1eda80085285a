use std::cell::RefCell;
use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array<T>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Copy of the parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Insert every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// SHA-256 over names, shapes and little-endian f64 values of the
    /// parameters whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which parameters receive gradients during a forward pass.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(p: &[S]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Forward-pass context: a graph plus lazily materialised parameter vars.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    trainable: Trainable,
    vars: RefCell<BTreeMap<String, Var<'g, T>>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, trainable: Trainable) -> Self {
        Self { graph, store, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    /// The var for parameter `name`; panics if it was never initialised,
    /// which is a wiring bug rather than a runtime condition.
    pub fn param(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self.store.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`")).clone();
        let v = if self.trainable.includes(name) { self.graph.leaf(value) } else { self.graph.constant(value) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn constant(&self, a: Array<T>) -> Var<'g, T> {
        self.graph.constant(a)
    }

    /// Gradients of every trainable parameter touched by this pass. Trainable
    /// parameters that did not influence the loss get explicit zeros.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Array<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(name, _)| self.trainable.includes(name))
            .map(|(name, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Array::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
