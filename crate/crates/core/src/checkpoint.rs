//! Named-tensor checkpoints.
//!
//! On disk a checkpoint is one JSON object:
//!
//! ```text
//! {"format":"svib-checkpoint","version":1,"step":N,
//!  "tensors":[{"name":"encoder.0.weight","shape":[r,c],"data":[...]}, ...]}
//! ```
//!
//! `data` is row-major and every float round-trips exactly. Tensor order is
//! the parameter order of the owning networks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "svib-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_params<'a>(step: u64, params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            step,
            tensors: params
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialisation cannot fail")
    }

    /// Hash of the serialised form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .and_then(|t| Tensor::new(t.shape.clone(), t.data.clone()).ok())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        for t in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len()),
                });
            }
        }
        Ok(ck)
    }

    /// Copies stored values into `params` (matched by name and shape).
    pub fn restore(&self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, t) in params {
            let stored = self
                .tensors
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::Contract(format!("checkpoint has no tensor {name}")))?;
            if stored.shape != t.shape() {
                return Err(Error::Dimension {
                    op: "restore",
                    lhs: stored.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(&stored.data);
        }
        Ok(())
    }
}
