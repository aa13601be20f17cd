use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffError;

/// Parameter groups the training schemes know how to mask.
pub const KNOWN_GROUPS: [&str; 5] = ["encoder", "decoder", "forcing_net", "noise_net", "sigma_scale"];

/// Every trainable array, keyed by entry name, with named groups.
///
/// Each entry belongs to exactly one group, which keeps the groups
/// disjoint. Shapes are fixed at insertion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
    groups: BTreeMap<String, BTreeSet<String>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, group: &str) -> Result<(), DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateEntry(name.to_string()));
        }
        if !KNOWN_GROUPS.contains(&group) {
            return Err(DiffError::UnknownGroup(group.to_string()));
        }
        self.entries.insert(name.to_string(), value);
        self.groups
            .entry(group.to_string())
            .or_default()
            .insert(name.to_string());
        Ok(())
    }

    /// Glorot-uniform weight matrix `fan_in × fan_out`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: &str,
        rng: &mut R,
    ) -> Result<(), DiffError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
        self.insert(name, w, group)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize, group: &str) -> Result<(), DiffError> {
        self.insert(name, Array2::zeros((rows, cols)), group)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Overwrites an entry's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), DiffError> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownEntry(name.to_string()))?;
        if slot.dim() != value.dim() {
            return Err(DiffError::ShapeMismatch {
                entry: name.to_string(),
                expected: slot.dim(),
                found: value.dim(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn size(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn group(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.groups.get(name)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.groups.iter()
    }

    pub fn group_of(&self, entry: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, members)| members.contains(entry))
            .map(|(g, _)| g.as_str())
    }

    /// Checks the group invariants after deserialization.
    pub fn validate(&self) -> Result<(), DiffError> {
        let mut seen = BTreeSet::new();
        for (group, members) in &self.groups {
            if !KNOWN_GROUPS.contains(&group.as_str()) {
                return Err(DiffError::UnknownGroup(group.clone()));
            }
            for m in members {
                if !self.entries.contains_key(m) {
                    return Err(DiffError::UnknownEntry(m.clone()));
                }
                if !seen.insert(m.clone()) {
                    return Err(DiffError::DuplicateEntry(m.clone()));
                }
            }
        }
        if let Some(orphan) = self.entries.keys().find(|k| !seen.contains(*k)) {
            return Err(DiffError::UngroupedEntry(orphan.clone()));
        }
        Ok(())
    }
}
