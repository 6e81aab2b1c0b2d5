use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{invalid, Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable weights carry gradients; buffers (BN running statistics) never do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// A named tensor owned by a model.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Flat, name-indexed storage for every tensor a model owns.
///
/// Modules hold [`ParamId`] handles into the store, so sharing a module
/// between stages means sharing handles.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add_weight(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), ParamKind::Weight, tensor.with_grad())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        tensor.set_requires_grad(false);
        self.insert(name.into(), ParamKind::Buffer, tensor)
    }

    fn insert(&mut self, name: String, kind: ParamKind, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|id| self.tensor(id))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of all entries whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Freezes or unfreezes every weight under `prefix`. Values are untouched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut() {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.tensor.set_requires_grad(trainable);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Total number of scalars held by weights.
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies values from `src` for every name present in both stores,
    /// mapping names through `rename` first. Returns the number copied.
    pub fn copy_from(&mut self, src: &ParamStore<T>, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut copied = 0;
        for p in &src.params {
            let Some(dst_name) = rename(&p.name) else { continue };
            let id = self.id(&dst_name).ok_or_else(|| Error::MissingParam(dst_name.clone()))?;
            let dst = &mut self.params[id.0].tensor;
            if dst.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "copy_from",
                    lhs: dst.shape().to_vec(),
                    rhs: p.tensor.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Converts the whole store to another precision, preserving trainability.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let mut t = p.tensor.cast::<U>();
            t.set_requires_grad(p.tensor.requires_grad());
            out.insert(p.name.clone(), p.kind, t).expect("names already unique");
        }
        out
    }

    /// True iff both stores hold the same names with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}
