//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Uniform initialization in `±1/√fan_in`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(
            name,
            Tensor::new(shape, data).expect("shape matches buffer"),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Lazily registers parameters as tracked leaves of one graph.
///
/// Parameters never touched by the forward pass never enter the graph, so
/// they receive no gradient.
#[derive(Debug)]
pub struct Bound<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.param(self.store.get(id).clone()))
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Gradients of every parameter after `backward`; untouched parameters map to `None`.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| g.grad(v).cloned()))
            .collect()
    }
}
