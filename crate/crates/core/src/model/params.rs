use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named tensors in insertion order. Frozen entries bind as constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param<S>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &Param<S> {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.find(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.find(name).map(|i| &mut self.entries[i].value)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every tensor on the tape; trainable ones as differentiable
    /// leaves when `grad` is set.
    pub fn bind(&self, tape: &mut Tape<S>, grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| {
                if grad && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn values(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }
}
