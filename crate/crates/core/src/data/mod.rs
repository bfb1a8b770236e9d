//! Bags, dataset metadata, the `.ts` text format and checkpoints.

mod checkpoint;
mod ts;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry, CHECKPOINT_VERSION};
pub use ts::{parse_ts, parse_ts_str, write_ts};

use crate::error::{Error, Result};

/// One multivariate series (`t × d`, row-major by time) with its class index.
/// Rows `valid_len..t` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub values: Vec<f64>,
    pub t: usize,
    pub d: usize,
    pub label: usize,
    pub valid_len: usize,
}

impl Bag {
    pub fn new(id: impl Into<String>, values: Vec<f64>, t: usize, d: usize, label: usize) -> Result<Self> {
        let id = id.into();
        if t == 0 || d == 0 {
            return Err(Error::Schema(format!("bag {id}: empty series ({t} x {d})")));
        }
        if values.len() != t * d {
            return Err(Error::Schema(format!(
                "bag {id}: {} values for a {t} x {d} series",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "bag {id}: non-finite value at time {} channel {}",
                i / d,
                i % d
            )));
        }
        Ok(Self {
            id,
            values,
            t,
            d,
            label,
            valid_len: t,
        })
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.d + c]
    }

    /// Whether the series carries trailing zero padding.
    pub fn is_padded(&self) -> bool {
        self.valid_len < self.t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub dimensions: usize,
    /// Common series length, `None` when lengths vary.
    pub series_length: Option<usize>,
    /// Length every bag is padded to.
    pub max_length: usize,
    pub class_labels: Vec<String>,
    pub num_bags: usize,
}

impl DatasetMeta {
    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn validate(&self, bags: &[Bag]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.class_labels {
            if !seen.insert(l) {
                return Err(Error::Schema(format!("duplicate class label '{l}'")));
            }
        }
        if let Some(b) = bags.iter().find(|b| b.label >= self.class_labels.len()) {
            return Err(Error::Schema(format!(
                "bag {} has label index {} outside {} classes",
                b.id,
                b.label,
                self.class_labels.len()
            )));
        }
        Ok(())
    }
}
