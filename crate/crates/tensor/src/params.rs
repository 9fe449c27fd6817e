use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named trainable tensors. Names are unique and shapes are fixed at insertion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces the values of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(shape_err("param_set", format!("`{name}` is {:?}, got {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Keeps only parameters whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), step: self.step }
    }
}
