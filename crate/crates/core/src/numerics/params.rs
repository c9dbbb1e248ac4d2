use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Registry of every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.params.insert_full(name, tensor);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id.0].accumulate_grad(g);
        }
    }

    pub fn to_parameters(&self) -> Vec<Parameter> {
        self.params
            .iter()
            .map(|(k, v)| Parameter {
                name: k.clone(),
                tensor: v.clone(),
            })
            .collect()
    }
}

/// Gradients of a scalar with respect to the parameters that fed it.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn push(&mut self, id: ParamId, g: Vec<f64>) {
        if let Some((_, existing)) = self.by_param.iter_mut().find(|(p, _)| *p == id) {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        } else {
            self.by_param.push((id, g));
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for (_, g) in &mut self.by_param {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        self
    }

    /// Sum another set of gradients into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            self.push(id, g);
        }
    }
}
