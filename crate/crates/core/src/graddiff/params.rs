use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcmError};
use crate::numerics::Matrix;

/// Named parameter slots with fixed shapes.
///
/// Slots are kept in a `BTreeMap` so iteration order (and therefore every
/// optimizer trajectory and checkpoint) is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    slots: BTreeMap<String, Matrix>,
    generation: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(TcmError::numeric(
                format!("register {name}"),
                "non-finite initial value",
            ));
        }
        if let Some(existing) = self.slots.get(&name) {
            if existing.shape() != value.shape() {
                return Err(TcmError::shape(
                    "ParamStore::register",
                    format!(
                        "slot {name} is {:?}, got {:?}",
                        existing.shape(),
                        value.shape()
                    ),
                ));
            }
        }
        self.slots.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.slots
            .get(name)
            .ok_or_else(|| TcmError::Contract(format!("unknown parameter slot `{name}`")))
    }

    /// Overwrites a slot, keeping its registered shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TcmError::Contract(format!("unknown parameter slot `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(TcmError::shape(
                "ParamStore::set",
                format!("slot {name} is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        self.generation += 1;
        Ok(())
    }

    pub(crate) fn slot_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.slots
            .get_mut(name)
            .ok_or_else(|| TcmError::Contract(format!("unknown parameter slot `{name}`")))
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|m| m.data().len()).sum()
    }

    /// True when every slot holds bit-identical values (generation ignored).
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.slots == other.slots
    }

    /// Copies of all slots whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            slots: self
                .slots
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            generation: 0,
        }
    }
}

/// Gradients keyed by slot name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: Matrix) {
        match self.slots.get_mut(name) {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => {
                self.slots.insert(name.to_string(), g);
            }
        }
    }

    /// Keeps only slots whose name starts with one of `prefixes`.
    pub fn retain_prefixes(mut self, prefixes: &[&str]) -> Gradients {
        self.slots
            .retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
        self
    }

    pub fn scaled(&self, s: f64) -> Gradients {
        Gradients {
            slots: self
                .slots
                .iter()
                .map(|(k, v)| (k.clone(), v.scale(s)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.values().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.slots.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}
