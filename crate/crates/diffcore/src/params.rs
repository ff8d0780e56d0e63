use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether an entry is optimized or only carried along (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m1: Tensor<T>,
    pub m2: Tensor<T>,
    pub step: u64,
    pub role: Role,
    /// Frozen weights are bound as constants and skipped by the optimizer.
    pub trainable: bool,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: Tensor<T>, role: Role) -> Self {
        let zeros = Tensor::zeros(value.shape());
        ParamEntry {
            grad: zeros.clone(),
            m1: zeros.clone(),
            m2: zeros,
            value,
            step: 0,
            role,
            trainable: role == Role::Weight,
        }
    }

    pub fn is_optimized(&self) -> bool {
        self.role == Role::Weight && self.trainable
    }
}

/// Named parameters with gradient buffers and Adam moments, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, role: Role) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value, role));
        Ok(())
    }

    pub fn insert_entry(&mut self, name: &str, entry: ParamEntry<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries.get(name).ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries.get_mut(name).ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(DiffError::shape("set_value", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Sets the trainable flag of every weight whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if e.role == Role::Weight && name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Number of scalar weights (buffers excluded) under `prefix`.
    pub fn weight_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.role == Role::Weight && k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            m1: e.m1.cast(),
                            m2: e.m2.cast(),
                            step: e.step,
                            role: e.role,
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry of `other` under `prefix` into this store, replacing values.
    pub fn copy_from(&mut self, other: &ParameterStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, e) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.value.shape() != e.value.shape() {
                return Err(DiffError::shape("copy_from", dst.value.shape(), e.value.shape()));
            }
            dst.value = e.value.clone();
            n += 1;
        }
        Ok(n)
    }
}
