//! Named parameter collections with trainable/frozen flags.
//!
//! Names are hierarchical dot paths (`dam.layer.3.attn.wq`). The backbone
//! lives under `dam.` and the relevance module under `rem.`; phase switches
//! flip the trainable flags of whole prefixes, which is how freezing works.

use std::collections::BTreeMap;

use crate::error::{DdrError, Result};
use crate::numerics::{Scalar, Tensor};

/// Gradients keyed by parameter path. BTreeMap keeps iteration deterministic.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(DdrError::Invalid(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries
            .insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.entries.get_mut(name)
    }

    /// Tensor lookup that reports the missing path.
    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| DdrError::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministic (sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total scalar count, optionally restricted to one name prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, param) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                param.trainable = trainable;
            }
        }
    }

    /// Move every entry of `other` in; collisions are an error (the namespace
    /// disjointness contract between backbone and REM).
    pub fn merge(&mut self, other: ParamSet<F>) -> Result<()> {
        for (name, param) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(DdrError::Invalid(format!(
                    "parameter namespace collision on `{name}`"
                )));
            }
            self.entries.insert(name, param);
        }
        Ok(())
    }

    /// Clone of the entries under one prefix.
    pub fn subset(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        Param {
                            tensor: v.tensor.cast::<G>(),
                            trainable: v.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of all tensors under a prefix ("" compares everything).
    pub fn bitwise_eq_prefix(&self, other: &ParamSet<F>, prefix: &str) -> bool {
        let mine: Vec<_> = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        let theirs: Vec<_> = other
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|((ka, pa), (kb, pb))| ka == kb && pa.tensor.bitwise_eq(&pb.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", t(1.0), true).unwrap();
        assert!(ps.insert("a.w", t(2.0), true).is_err());
    }

    #[test]
    fn trainable_partition_covers_everything() {
        let mut ps = ParamSet::new();
        ps.insert("dam.w", t(1.0), false).unwrap();
        ps.insert("rem.a", t(2.0), true).unwrap();
        let mut all = ps.trainable_names();
        all.extend(ps.frozen_names());
        all.sort();
        assert_eq!(all, ps.names());
    }

    #[test]
    fn merge_detects_collision() {
        let mut a = ParamSet::new();
        a.insert("dam.w", t(1.0), true).unwrap();
        let mut b = ParamSet::new();
        b.insert("dam.w", t(2.0), true).unwrap();
        assert!(a.merge(b).is_err());
    }

    #[test]
    fn prefix_flagging() {
        let mut ps = ParamSet::new();
        ps.insert("dam.w", t(1.0), true).unwrap();
        ps.insert("rem.a", t(2.0), true).unwrap();
        ps.set_trainable_by_prefix("dam.", false);
        assert_eq!(ps.trainable_names(), vec!["rem.a".to_string()]);
    }
}
