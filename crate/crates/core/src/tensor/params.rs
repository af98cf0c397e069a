use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named model parameter. Frozen parameters (`trainable == false`) enter
/// tapes as constants and are never touched by an optimizer step.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn trainable(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value, trainable: false }
    }
}

/// Ordered collection of parameters keyed by path-like names
/// (`backbone/layer3/shared/attn_q_w`, `prompter/rgb2tir/layer1/...`).
/// Iteration order is the name order, which keeps optimizer sweeps and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.map.insert(
            name.clone(),
            Parameter { name, value, trainable },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.map.get_mut(name)
    }

    /// Panics if the name is absent; parameter names are static strings
    /// owned by the model builders, so a miss is a programming error.
    pub fn expect(&self, name: &str) -> &Parameter {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.map.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.map.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.value.zero_grad();
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.map.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Merges another set into this one; names must not collide.
    pub fn absorb(&mut self, other: ParamSet) -> Result<()> {
        for (name, p) in other.map {
            if self.map.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
            self.map.insert(name, p);
        }
        Ok(())
    }

    /// Bit-level snapshot of every value buffer, for freeze audits.
    pub fn snapshot_bits(&self) -> BTreeMap<String, Vec<u64>> {
        self.map
            .iter()
            .map(|(name, p)| (name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    /// True when every value is bit-identical to the given snapshot.
    pub fn matches_snapshot(&self, snapshot: &BTreeMap<String, Vec<u64>>) -> bool {
        if self.map.len() != snapshot.len() {
            return false;
        }
        self.map.iter().all(|(name, p)| {
            snapshot.get(name).is_some_and(|bits| {
                bits.len() == p.value.numel()
                    && p.value.data().iter().zip(bits).all(|(v, b)| v.to_bits() == *b)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0), true).unwrap();
        assert!(ps.insert("w", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn snapshot_detects_mutation() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::full(vec![2, 2], 0.25), true).unwrap();
        let snap = ps.snapshot_bits();
        assert!(ps.matches_snapshot(&snap));
        ps.get_mut("w").unwrap().value.data_mut()[0] += 1e-16;
        assert!(!ps.matches_snapshot(&snap));
    }
}
