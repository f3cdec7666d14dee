use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// Gradients keyed by parameter name.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{name}` is {:?}, got {:?}", entry.tensor.shape(), tensor.shape()),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn get_mut_data(&mut self, name: &str) -> Result<&mut [T]> {
        self.entries
            .get_mut(name)
            .map(|e| e.tensor.data_mut())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
