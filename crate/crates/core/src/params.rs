//! Named parameter tensors in a stable insertion order.

use indexmap::IndexMap;

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Exact bitwise equality of every tensor, including names and order.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Gradients keyed by parameter name. Missing entries mean zero.
pub type GradStore<T> = IndexMap<String, Tensor<T>>;

/// Binds parameters into a [`Graph`] on first use.
///
/// Trainable bindings create gradient-tracked leaves; otherwise parameters
/// become constants and no backward graph is recorded.
pub struct Bindings<'a, T> {
    store: &'a ParamStore<T>,
    ids: IndexMap<String, NodeId>,
    trainable: bool,
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            store,
            ids: IndexMap::new(),
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn node(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect(&self, grads: &mut Gradients<T>) -> GradStore<T> {
        self.ids
            .iter()
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }
}
