//! Bags, persistence, dataset manifests and the synthetic generator.

mod manifest;
mod mbag;
mod synthetic;

pub use manifest::{split_manifest, Manifest, ManifestEntry, Split};
pub use mbag::{decode_bag, encode_bag, read_bag, write_bag, MBAG_MAGIC, MBAG_VERSION};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, PatchHierarchy, PatchNode};
use crate::tensor::{Scalar, Tensor};

/// One patch token: position in the hierarchy plus its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BagRecord {
    pub level: u8,
    pub path: Vec<u16>,
    pub coord: (u16, u16),
    pub features: Vec<f32>,
}

/// One slide's worth of tokens with its class label. `token_id` is the
/// record index.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub label: usize,
    /// Number of resolution levels (R).
    pub levels: u8,
    pub d_in: usize,
    pub records: Vec<BagRecord>,
}

impl Bag {
    /// Validates feature widths and the tree structure.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::contract(format!("bag {} is empty", self.slide_id)));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.features.len() != self.d_in {
                return Err(Error::Structure(format!(
                    "bag {}: record {i} has {} features, expected {}",
                    self.slide_id,
                    rec.features.len(),
                    self.d_in
                )));
            }
        }
        self.hierarchy()?;
        Ok(())
    }

    pub fn hierarchy(&self) -> Result<PatchHierarchy> {
        let nodes = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| PatchNode {
                level: r.level,
                path: r.path.clone(),
                coord: r.coord,
                token_id: i,
            })
            .collect();
        build_hierarchy(nodes, self.levels)
    }

    /// Feature matrix `[N, D_in]` in record order.
    pub fn feature_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.records.len() * self.d_in);
        for rec in &self.records {
            data.extend(rec.features.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(vec![self.records.len(), self.d_in], data).expect("consistent d_in")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
