//! Named parameter storage with trainable flags.
//!
//! Entries keep insertion order so parameter initialization, optimizer
//! traversal, and checkpoint layout are deterministic for a fixed seed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.get(name).map(|&i| self.entries[i].trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].trainable = trainable;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter `{name}`"))),
        }
    }

    /// Replace an existing tensor (shape may change, e.g. a fresh task head).
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].tensor = tensor;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Number of trainable scalars reachable by the optimizer.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn total_scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    /// Freeze or unfreeze every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    /// Drop every parameter whose name satisfies `pred`.
    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.entries.retain(|e| !pred(&e.name));
        self.index.clear();
        for (i, e) in self.entries.iter().enumerate() {
            self.index.insert(e.name.clone(), i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn counts_track_trainable_flags() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[4]), true).unwrap();
        s.insert("b", Tensor::zeros(&[3]), false).unwrap();
        assert_eq!(s.trainable_scalar_count(), 4);
        assert_eq!(s.total_scalar_count(), 7);
        s.set_trainable("b", true).unwrap();
        assert_eq!(s.trainable_scalar_count(), 7);
        s.freeze_all();
        assert_eq!(s.trainable_scalar_count(), 0);
    }

    #[test]
    fn insertion_order_is_preserved() {
        let mut s = ParamStore::new();
        for name in ["z", "a", "m"] {
            s.insert(name, Tensor::zeros(&[1]), true).unwrap();
        }
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }
}
