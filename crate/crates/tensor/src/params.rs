use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tensor inside one particular [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Ordered collection of named parameter tensors.
///
/// Insertion order is preserved and defines the checkpoint layout. Each
/// store carries a unique tag so gradients computed for one store are never
/// applied to another (cloning a store yields a new tag).
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore { tag: fresh_tag(), names: self.names.clone(), tensors: self.tensors.clone(), index: self.index.clone() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tag: fresh_tag(), names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::contract(format!("duplicate parameter name {name:?}")));
        }
        let index = self.tensors.len();
        self.index.insert(name.clone(), index);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId { store: self.tag, index })
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&index| ParamId { store: self.tag, index })
    }

    /// Like [`id`](Self::id) but reports the missing name.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| TensorError::contract(format!("missing parameter {name:?}")))
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag && id.index < self.tensors.len()
    }

    fn check(&self, id: ParamId) -> usize {
        assert!(self.owns(id), "parameter id {id:?} does not belong to this store");
        id.index
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[self.check(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let i = self.check(id);
        &mut self.tensors[i]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.check(id)]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(move |index| ParamId { store: self.tag, index })
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.index].starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(flag);
        }
    }

    /// Adds every gradient in `grads` into the matching tensor's grad buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if grads.store != self.tag && !grads.map.is_empty() {
            return Err(TensorError::contract("gradients belong to a different store"));
        }
        for (&index, g) in &grads.map {
            self.tensors[index].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Snapshot of the current grad buffers.
    pub fn grads(&self) -> Gradients<T> {
        let mut out = Gradients::empty(self.tag);
        for (index, t) in self.tensors.iter().enumerate() {
            if let Some(g) = t.grad() {
                out.map.insert(index, g.to_vec());
            }
        }
        out
    }

    /// Copies values of every parameter whose name also exists in `other`
    /// with the same shape. Returns the number copied.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(&j) = other.index.get(name) {
                let src = &other.tensors[j];
                if src.shape() != self.tensors[i].shape() {
                    return Err(TensorError::shape("copy_values_from", self.tensors[i].shape(), src.shape()));
                }
                self.tensors[i].assign(src.data())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tag: fresh_tag(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }
}

/// Per-parameter gradient buffers produced by [`Tape::backward`](crate::Tape::backward).
///
/// Only parameters reachable from the loss appear; absent entries are zero.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    store: u64,
    map: BTreeMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn empty(store: u64) -> Self {
        Gradients { store, map: BTreeMap::new() }
    }

    /// An empty accumulator bound to `store`.
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::empty(store.tag())
    }

    pub(crate) fn add_raw(&mut self, id: ParamId, g: &[T]) {
        if self.map.is_empty() {
            self.store = id.store;
        }
        debug_assert_eq!(self.store, id.store);
        match self.map.get_mut(&id.index) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => {
                self.map.insert(id.index, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        if id.store != self.store {
            return None;
        }
        self.map.get(&id.index).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Adds `other` into `self` (both must refer to the same store).
    pub fn add(&mut self, other: &Gradients<T>) -> Result<()> {
        if other.map.is_empty() {
            return Ok(());
        }
        if !self.map.is_empty() && self.store != other.store {
            return Err(TensorError::contract("cannot add gradients of different stores"));
        }
        self.store = other.store;
        for (&index, g) in &other.map {
            match self.map.get_mut(&index) {
                Some(acc) => {
                    if acc.len() != g.len() {
                        return Err(TensorError::shape("gradients.add", &[acc.len()], &[g.len()]));
                    }
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.map.insert(index, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    /// Drops every entry not selected by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        let store = self.store;
        self.map.retain(|&index, _| keep(ParamId { store, index }));
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().map(|&index| ParamId { store: self.store, index })
    }

    pub fn l2_norm(&self) -> f64 {
        self.map.values().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a/w", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b/w", Tensor::zeros(&[3])).unwrap();
        assert!(s.add("a/w", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.id("b/w"), Some(b));
        assert_eq!(s.ids_with_prefix("a/").collect::<Vec<_>>(), vec![a]);
        assert_eq!(s.num_values(), 5);
    }

    #[test]
    fn clones_do_not_share_ids() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("w", Tensor::zeros(&[1])).unwrap();
        let c = s.clone();
        assert!(!c.owns(a));
        assert!(c.owns(c.id("w").unwrap()));
    }
}
