//! Named parameter storage with stable insertion order.

use std::collections::HashMap;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered map of named parameters. Iteration follows insertion order, which
/// fixes the checkpoint layout and the optimizer's update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidParameter(format!(
                "parameter {name}: data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Remove an entry; later entries keep their relative order.
    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        let i = self.index.remove(name)?;
        let entry = self.entries.remove(i);
        for (j, e) in self.entries.iter().enumerate().skip(i) {
            self.index.insert(e.name.clone(), j);
        }
        Some(entry)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = ParamStore::new();
        s.insert("b", vec![1], vec![1.0]).unwrap();
        s.insert("a", vec![1], vec![2.0]).unwrap();
        let names: Vec<&str> = s.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    fn remove_keeps_index_consistent() {
        let mut s = ParamStore::new();
        s.insert("a", vec![1], vec![1.0]).unwrap();
        s.insert("b", vec![1], vec![2.0]).unwrap();
        s.insert("c", vec![1], vec![3.0]).unwrap();
        s.remove("b").unwrap();
        assert_eq!(s.get("c").unwrap().data, vec![3.0]);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let mut s = ParamStore::new();
        s.insert("a", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(s.insert("a", vec![1], vec![0.0]).is_err());
        assert!(s.insert("b", vec![3], vec![0.0]).is_err());
    }
}
