//! Named parameter storage, initialisation policies and graph binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is, which decides how it is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned weights with their fan-in / fan-out.
    Weight { fan_in: usize, fan_out: usize },
    /// Additive bias, initialised to zero.
    Bias,
    /// Multiplicative normalisation gain, initialised to one.
    Gain,
}

/// How weights are drawn. Biases are always zero and gains one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitPolicy {
    Gaussian {
        std: f64,
    },
    /// Normal with variance `2 / (fan_in + fan_out)`.
    Xavier,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Gaussian { std: 0.02 }
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitPolicy::Gaussian { std } => write!(f, "gaussian:{std}"),
            InitPolicy::Xavier => write!(f, "xavier"),
        }
    }
}

impl FromStr for InitPolicy {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "xavier" {
            return Ok(InitPolicy::Xavier);
        }
        if let Some(std) = s.strip_prefix("gaussian:") {
            if let Ok(std) = std.parse::<f64>() {
                if std.is_finite() && std > 0.0 {
                    return Ok(InitPolicy::Gaussian { std });
                }
            }
        }
        Err(TensorError::InitPolicy(s.to_string()))
    }
}

impl InitPolicy {
    pub fn weight_std(&self, fan_in: usize, fan_out: usize) -> f64 {
        match *self {
            InitPolicy::Gaussian { std } => std,
            InitPolicy::Xavier => (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Arc<Tensor<T>>,
}

/// Ordered collection of named tensors. Registration order is the
/// canonical order for checkpoints and optimiser state.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Register a zero/one-initialised parameter. Panics on duplicate names,
    /// which indicate a model-construction bug.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let value = match kind {
            ParamKind::Gain => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.clone(), kind, value: Arc::new(value) });
        self.index.insert(name, id);
        id
    }

    /// Fill every weight from `policy`; biases become 0 and gains 1.
    pub fn initialize<R: Rng + ?Sized>(&mut self, policy: InitPolicy, rng: &mut R) {
        for e in &mut self.entries {
            let shape = e.value.shape().to_vec();
            let t = match e.kind {
                ParamKind::Weight { fan_in, fan_out } => {
                    let normal = Normal::new(0.0, policy.weight_std(fan_in, fan_out)).expect("valid std");
                    Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng)))
                }
                ParamKind::Bias => Tensor::zeros(&shape),
                ParamKind::Gain => Tensor::ones(&shape),
            };
            e.value = Arc::new(t);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_by_name(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        Ok(self.get(self.id(name)?))
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replace a value; the shape must match the registered one.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let cur = self.get(id).shape();
        if cur != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name(id),
                cur,
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        let id = self.id(name)?;
        self.set(id, value)
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.value = Arc::new(Tensor::zeros(e.value.shape()));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }
}

/// A parameter store attached to one graph. Each parameter becomes a
/// single leaf the first time it is requested.
pub struct Bound<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, 's, T: Scalar> Bound<'g, 's, T> {
    /// Parameters receive gradients.
    pub fn trainable(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(graph, store, true)
    }

    /// Parameters are constants; gradients still flow through to inputs.
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(graph, store, false)
    }

    fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { graph, store, trainable, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.graph.leaf(self.store.shared(id), self.trainable))
    }

    /// Gradients for every parameter in store order; parameters that were
    /// not used (or are frozen) get zeros.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| match vars[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}
