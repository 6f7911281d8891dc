use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Named, ordered collection of dense parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Flat wire form used by the checkpoint format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn to_blobs(&self, prefix: &str) -> Vec<ParamBlob> {
        self.entries
            .iter()
            .map(|(name, value)| ParamBlob {
                name: format!("{prefix}{name}"),
                rows: value.nrows(),
                cols: value.ncols(),
                data: value.iter().cloned().collect(),
            })
            .collect()
    }

    pub fn load_blob(&mut self, name: &str, blob: &ParamBlob) -> Result<(), String> {
        let value = self.get_mut(name);
        if value.nrows() != blob.rows || value.ncols() != blob.cols {
            return Err(format!(
                "shape mismatch for {name}: checkpoint {}x{}, model {}x{}",
                blob.rows,
                blob.cols,
                value.nrows(),
                value.ncols()
            ));
        }
        for (slot, v) in value.iter_mut().zip(blob.data.iter()) {
            *slot = *v;
        }
        Ok(())
    }
}
