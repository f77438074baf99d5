use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`Params`] collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered collection of trainable tensors owned by one model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Params {
    entries: Vec<NamedTensor>,
}

/// Graph leaves for every tensor of a [`Params`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor { name: name.into(), tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.entries.len());
        for (e, t) in self.entries.iter_mut().zip(tensors) {
            assert_eq!(e.tensor.shape(), t.shape(), "shape change for {}", e.name);
            e.tensor = t;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings(self.entries.iter().map(|e| g.param(e.tensor.clone())).collect())
    }

    /// Same leaves as [`bind`](Self::bind) but excluded from differentiation.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        Bindings(self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect())
    }

    pub fn grads(&self, g: &Graph, bindings: &Bindings) -> Vec<Tensor> {
        bindings.0.iter().map(|&v| g.grad(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}
