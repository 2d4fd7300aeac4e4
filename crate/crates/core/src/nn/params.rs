use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by gradient descent and counted as a model parameter.
    Trainable,
    /// State such as batch-norm running statistics; saved, never counted.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    /// Layer the entry belongs to, used for per-layer accounting.
    pub layer: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Ordered name → tensor map holding every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        layer: &str,
        local: &str,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = format!("{layer}.{local}");
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            layer: layer.to_string(),
            tensor,
            kind,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|(_, e)| e.tensor.numel()).sum()
    }

    /// Flattened copy of every trainable scalar, in store order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.trainable()
            .flat_map(|(_, e)| e.tensor.data().iter().copied())
            .collect()
    }

    /// Places every entry on `graph`: trainable entries as differentiable
    /// leaves, buffers as constants. The returned vector is indexed by
    /// [`ParamId::index`].
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => graph.param(e.tensor.clone()),
                ParamKind::Buffer => graph.constant(e.tensor.clone()),
            })
            .collect()
    }

    /// Same as [`ParamStore::bind`] but without gradient tracking.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| graph.constant(e.tensor.clone()))
            .collect()
    }
}

/// Allocates and initializes parameters while a model is assembled.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Init { store, rng }
    }

    /// Uniform in ±sqrt(1 / fan_in).
    pub fn uniform(
        &mut self,
        layer: &str,
        local: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.insert(
            layer,
            local,
            Tensor::new(shape.to_vec(), data)?,
            ParamKind::Trainable,
        )
    }

    pub fn constant(
        &mut self,
        layer: &str,
        local: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.store.insert(
            layer,
            local,
            Tensor::full(shape, value),
            ParamKind::Trainable,
        )
    }

    pub fn buffer(
        &mut self,
        layer: &str,
        local: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.store
            .insert(layer, local, Tensor::full(shape, value), ParamKind::Buffer)
    }
}
