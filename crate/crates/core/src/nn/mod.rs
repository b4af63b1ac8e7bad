//! Parameter storage and the composite layers the model is built from.

mod blocks;
mod layers;

use std::collections::HashMap;
use std::sync::RwLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, invalid, Result};
use crate::tensor::{Scalar, Tensor};

pub use blocks::{Caff, DecoderBlock, EdgeCompact, EdgeHead, InvertedResidual, IrbConfig};
pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, ConvBnReluParams, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried along with the weights (batch-norm running statistics).
    Buffer,
}

struct Entry<T: Scalar> {
    name: String,
    kind: EntryKind,
    value: RwLock<Tensor<T>>,
}

/// Named, ordered collection of every tensor a model owns.
///
/// Layers hold [`ParamId`]s into the store. Reads clone the current tensor
/// handle; updates swap in a new tensor, so a graph built from older values
/// stays consistent.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, kind: EntryKind, tensor: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value: RwLock::new(tensor),
        });
        ParamId(id)
    }

    pub fn add_trainable(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> ParamId {
        let t = Tensor::parameter(data, shape).expect("parameter shape");
        self.insert(name, EntryKind::Trainable, t)
    }

    pub fn add_buffer(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> ParamId {
        let t = Tensor::from_vec(data, shape).expect("buffer shape");
        self.insert(name, EntryKind::Buffer, t)
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        self.entries[id.0].value.read().expect("param lock").clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<Tensor<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| invalid!("no parameter named {name}"))
    }

    /// Replaces the values of an entry, keeping its kind and shape.
    pub fn set(&self, id: ParamId, data: Vec<T>) -> Result<()> {
        let entry = &self.entries[id.0];
        let mut slot = entry.value.write().expect("param lock");
        let shape = slot.shape().to_vec();
        *slot = match entry.kind {
            EntryKind::Trainable => Tensor::parameter(data, &shape)?,
            EntryKind::Buffer => Tensor::from_vec(data, &shape)?,
        };
        Ok(())
    }

    /// Swaps in `tensor` itself, so gradients of a graph built from the store
    /// land on it. Used to differentiate with respect to chosen parameters.
    pub fn replace(&self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let mut slot = self.entries[id.0].value.write().expect("param lock");
        ensure!(
            slot.shape() == tensor.shape(),
            "replace: {} has shape {:?}, got {:?}",
            self.entries[id.0].name,
            slot.shape(),
            tensor.shape()
        );
        *slot = tensor;
        Ok(())
    }

    pub fn set_by_name(&self, name: &str, data: Vec<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| invalid!("no parameter named {name}"))?;
        self.set(id, data)
    }

    /// Fills every entry whose name matches `pred` with `value`.
    pub fn fill_where(&self, pred: impl Fn(&str) -> bool, value: f64) -> usize {
        let mut hits = 0;
        for id in self.ids() {
            if pred(self.name(id)) {
                let n = self.get(id).numel();
                self.set(id, vec![T::lit(value); n]).expect("same shape");
                hits += 1;
            }
        }
        hits
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == EntryKind::Trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count over trainable tensors (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grad(&self) {
        for id in self.trainable_ids() {
            self.get(id).zero_grad();
        }
    }

    /// Copy of every value converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let t: Tensor<U> = e.value.read().expect("param lock").cast();
            let t = match e.kind {
                EntryKind::Trainable => t.with_requires_grad(true),
                EntryKind::Buffer => t,
            };
            out.insert(&e.name, e.kind, t);
        }
        out
    }
}

/// Kaiming (He) normal initialization: `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    normal(rng, n, (2.0 / fan_in.max(1) as f64).sqrt())
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_set_replaces_values_and_keeps_kind() {
        let mut vs = ParamStore::<f64>::new();
        let w = vs.add_trainable("w", vec![1.0, 2.0], &[2]);
        let b = vs.add_buffer("rm", vec![0.0], &[1]);
        vs.set(w, vec![3.0, 4.0]).unwrap();
        assert_eq!(vs.get(w).data(), &[3.0, 4.0]);
        assert!(vs.get(w).requires_grad());
        assert!(!vs.get(b).requires_grad());
        assert!(vs.set(w, vec![1.0]).is_err());
        assert_eq!(vs.count_params(), 2);
        assert_eq!(vs.id("rm"), Some(b));
    }
}
