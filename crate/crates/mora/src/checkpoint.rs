//! Flat key -> array parameter snapshots.
//!
//! Checkpoints are a textual JSON map from canonical parameter names (for
//! example `mora.0.query.A` or `classifier.w1`) to shape + row-major data.
//! The map is ordered, so serialization is byte-stable, and f64 values
//! survive a JSON round trip bit-exactly (shortest-representation printing,
//! correctly rounded parsing).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NamedParam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    /// Snapshots the current values of the given parameters.
    pub fn from_params(params: &[NamedParam]) -> Self {
        let entries = params
            .iter()
            .map(|p| {
                let t = p.param.borrow();
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint { entries }
    }

    /// Writes every entry back into the matching parameter. The name sets
    /// and shapes must agree exactly.
    pub fn restore(&self, params: &[NamedParam]) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} entries but {} parameters were given",
                self.entries.len(),
                params.len()
            )));
        }
        for p in params {
            let record = self.entries.get(&p.name).ok_or_else(|| {
                Error::Contract(format!("checkpoint is missing entry `{}`", p.name))
            })?;
            if record.shape != p.param.borrow().shape() {
                return Err(Error::Shape {
                    op: "checkpoint restore",
                    lhs: p.param.borrow().shape().to_vec(),
                    rhs: record.shape.clone(),
                });
            }
            p.param.borrow_mut().set_data(record.data.clone())?;
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_json_bytes(&bytes)
    }
}
