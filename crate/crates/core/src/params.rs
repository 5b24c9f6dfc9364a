//! Named parameter storage and per-graph binding.

use std::cell::RefCell;
use std::collections::HashMap;

use lic_autodiff::{Gradients, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    /// Uniform with bound `1/sqrt(fan_in)`.
    FanIn(usize),
    Values(Vec<f64>),
}

/// Flat, ordered collection of named tensors.
///
/// A store built with [`ParamStore::shapes_only`] records names and shapes
/// without allocating, which is enough for parameter counting.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
    allocate: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            allocate: true,
        }
    }

    pub fn shapes_only() -> Self {
        ParamStore { allocate: false, ..Self::new(0) }
    }

    pub fn is_allocated(&self) -> bool {
        self.allocate
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope { store: self, prefix: prefix.to_string() }
    }

    fn register(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        if self.allocate {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => vec![v; n],
                Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
                Init::FanIn(fan) => {
                    let b = 1.0 / (fan.max(1) as f64).sqrt();
                    (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
                }
                Init::Values(v) => {
                    assert_eq!(v.len(), n, "init values for {name}");
                    v
                }
            };
            self.values.push(Tensor::from_vec(shape, data));
        }
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.shapes)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        assert!(self.allocate, "parameter values requested from a shapes-only store");
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Copies every parameter of `other` whose name and shape match.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (id, name) in self.names.iter().enumerate() {
            if let Some(oid) = other.id(name) {
                if other.shapes[oid] == self.shapes[id] {
                    self.values[id] = other.values[oid].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (i, name) in self.names.iter().enumerate() {
            h.update(name.as_bytes());
            for &d in &self.shapes[i] {
                h.update((d as u64).to_le_bytes());
            }
            if self.allocate {
                for v in self.values[i].data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest restricted to parameters whose name starts with `prefix`.
    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (i, name) in self.names.iter().enumerate().filter(|(_, n)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in self.values[i].data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Registration handle that prefixes names with a dotted path.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.register(full, shape, init)
    }
}

/// Parameters lazily placed on a graph. Only parameters touched by a forward
/// pass become graph leaves.
pub struct Bound<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: Box<dyn Fn(&str) -> bool + 'g>,
    attention_log: RefCell<Option<Vec<(String, Tensor)>>>,
}

impl<'g> Bound<'g> {
    /// Every parameter is trainable (when the graph records gradients).
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self::with_filter(graph, store, |_| true)
    }

    /// Parameters are trainable iff `trainable(name)`.
    pub fn with_filter(graph: &'g Graph, store: &'g ParamStore, trainable: impl Fn(&str) -> bool + 'g) -> Self {
        Bound {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable: Box::new(trainable),
            attention_log: RefCell::new(None),
        }
    }

    /// Starts collecting channel-attention maps emitted during forward passes.
    pub fn enable_attention_log(&self) {
        *self.attention_log.borrow_mut() = Some(Vec::new());
    }

    pub fn log_attention(&self, name: impl FnOnce() -> String, map: &Tensor) {
        if let Some(log) = self.attention_log.borrow_mut().as_mut() {
            log.push((name(), map.clone()));
        }
    }

    pub fn take_attention_log(&self) -> Vec<(String, Tensor)> {
        self.attention_log.borrow_mut().take().unwrap_or_default()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if (self.trainable)(self.store.name(id)) {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.vars.borrow_mut()[id] = Some(v);
        v
    }

    /// Scalar value of a one-element parameter without placing it on the graph.
    pub fn scalar(&self, id: ParamId) -> f64 {
        self.store.value(id).data()[0]
    }

    /// One gradient slot per parameter, in store order.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_names_and_matching_load() {
        let mut a = ParamStore::new(1);
        let w = a.scope("enc").sub("conv").param("w", &[2, 3], Init::FanIn(3));
        a.scope("enc").param("b", &[2], Init::Zeros);
        assert_eq!(a.name(w), "enc.conv.w");
        let mut b = ParamStore::new(2);
        b.scope("enc").sub("conv").param("w", &[2, 3], Init::Zeros);
        b.scope("enc").param("b", &[3], Init::Zeros);
        assert_eq!(b.load_matching(&a), 1);
        assert_eq!(b.value(0).data(), a.value(0).data());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn shapes_only_counts_without_values() {
        let mut s = ParamStore::shapes_only();
        s.scope("x").param("w", &[10, 20], Init::FanIn(20));
        assert_eq!(s.num_scalars(), 200);
        assert!(s.values().is_empty());
    }
}
