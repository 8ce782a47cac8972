//! Embedding datasets, the synthetic generator, federated splitting and the
//! FMEB file format.

pub mod fmeb;
pub mod split;
pub mod synthetic;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::EmbeddingVec;

pub use fmeb::{read_fmeb, read_fmeb_with_dim, write_fmeb, FmebError};
pub use split::{make_split, sample_partitions, FederatedSplit, SplitConfig, SplitPartitions};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class: usize,
    pub embedding: EmbeddingVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl EmbeddingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dataset dimension must be positive"));
        }
        for rec in &self.records {
            if rec.class >= self.class_names.len() {
                return Err(Error::config(format!(
                    "record class index {} out of range for {} classes",
                    rec.class,
                    self.class_names.len()
                )));
            }
            if rec.embedding.dim() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    found: rec.embedding.dim(),
                });
            }
            if rec.embedding.iter().any(|v| v.abs() > f32::MAX as f64) {
                return Err(Error::NonFinite("embedding outside f32 range"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Record indices grouped by class, in file order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_names.len()];
        for (i, rec) in self.records.iter().enumerate() {
            out[rec.class].push(i);
        }
        out
    }

    /// Builds a prompt file: one record per class, in class order.
    pub fn from_prompts(class_names: Vec<String>, prompts: &BTreeMap<usize, EmbeddingVec>) -> Result<Self> {
        let dim = prompts.values().next().map(|v| v.dim()).ok_or(Error::Empty("prompt set"))?;
        if prompts.len() != class_names.len() || prompts.keys().enumerate().any(|(i, c)| i != *c) {
            return Err(Error::ClassSetMismatch(
                "prompt map must cover every class exactly once".into(),
            ));
        }
        let records = prompts
            .iter()
            .map(|(c, e)| Record {
                class: *c,
                embedding: e.clone(),
            })
            .collect();
        let ds = Self {
            dim,
            class_names,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Interprets this dataset as a prompt file.
    pub fn to_prompt_map(&self) -> Result<BTreeMap<usize, EmbeddingVec>> {
        let mut map = BTreeMap::new();
        for rec in &self.records {
            if map.insert(rec.class, rec.embedding.clone()).is_some() {
                return Err(Error::ClassSetMismatch(format!(
                    "prompt file has more than one record for class {}",
                    rec.class
                )));
            }
        }
        if map.len() != self.class_names.len() {
            return Err(Error::ClassSetMismatch(format!(
                "prompt file covers {} of {} classes",
                map.len(),
                self.class_names.len()
            )));
        }
        Ok(map)
    }
}
