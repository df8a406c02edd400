use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::Real;

/// Named parameter arrays, ordered by name.
///
/// Values are reference counted so a [`Graph`](crate::Graph) can borrow them
/// without copying; updates after the graph is dropped happen in place.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    values: BTreeMap<String, Arc<ArrayD<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.values.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.values.get(name).map(|v| v.as_ref())
    }

    pub(crate) fn get_shared(&self, name: &str) -> Option<Arc<ArrayD<T>>> {
        self.values.get(name).cloned()
    }

    /// Mutable access; copies the array first if a live graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.values.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<T>> {
        self.values
            .remove(name)
            .map(|v| Arc::try_unwrap(v).unwrap_or_else(|shared| (*shared).clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            values: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.mapv(|x| U::of(x.f64())))))
                .collect(),
        }
    }

    /// Reads one scalar by flat (row-major) index.
    pub fn scalar(&self, name: &str, flat: usize) -> Option<T> {
        let v = self.values.get(name)?;
        v.as_slice().and_then(|s| s.get(flat).copied())
    }

    /// Overwrites one scalar by flat (row-major) index. Returns false when out of range.
    pub fn set_scalar(&mut self, name: &str, flat: usize, value: T) -> bool {
        match self
            .values
            .get_mut(name)
            .map(Arc::make_mut)
            .and_then(|a| a.as_slice_mut())
            .and_then(|s| s.get_mut(flat))
        {
            Some(slot) => {
                *slot = value;
                true
            }
            None => false,
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(other.values.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}
