use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` over `self`, adding missing names.
    pub fn merge(&mut self, other: &Params) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Checksum over names, shapes and raw bits of tensors under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            for b in k.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
            }
            h = (h ^ v.checksum()).wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Tape handles for a set of parameters.
///
/// Names can be re-rooted when binding so that, for example, `mom/enc/...`
/// tensors are looked up as `enc/...` by the model code.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Registers every parameter under `prefix` on `tape`. With `trainable`
    /// the tensors become named leaves, otherwise constants. `prefix` is
    /// stripped from the binding names.
    pub fn bind(tape: &mut Tape, params: &Params, prefix: &str, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let v = if trainable {
                tape.leaf(name.clone(), t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name[prefix.len()..].to_string(), v);
        }
        Self { vars }
    }

    pub fn extend(&mut self, other: Binding) {
        self.vars.extend(other.vars);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }
}
