use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which part of the architecture a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Source and target word-embedding tables.
    Embedding,
    Encoder,
    Decoder,
    Projection,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("embed") => ParamGroup::Embedding,
            Some("enc") => ParamGroup::Encoder,
            Some("dec") => ParamGroup::Decoder,
            Some("proj") => ParamGroup::Projection,
            _ => panic!("parameter `{name}` has no group prefix"),
        }
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.entries.iter().any(|(n, _)| ParamGroup::of(n) == group)
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        let kept: Vec<(String, Tensor)> = std::mem::take(&mut self.entries)
            .into_iter()
            .filter(|(n, _)| ParamGroup::of(n) != group)
            .collect();
        self.index = kept.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        self.entries = kept;
    }

    /// Copy of every parameter of `group`.
    pub fn group(&self, group: ParamGroup) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| ParamGroup::of(n) == group) {
            out.insert(n, t.clone());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
