//! Versioned checkpoint container.
//!
//! ```text
//! magic       8 bytes  "LSGCKPT1"
//! header_len  u32 LE
//! header      UTF-8 JSON (architecture, spec, epoch, tags, tensor table)
//! tensors     f64 LE, in header order
//! velocity    f64 LE, in header order (optional optimizer state)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::NetworkSpec;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::optimization::{OptimizerConfig, OptimizerState};
use crate::params::{Param, ParamStore};
use crate::volume::IntensityStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSGCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Source tag, e.g. a task name or `multi_lesion`.
    pub tag: String,
    #[serde(default)]
    pub source_tasks: Vec<String>,
    #[serde(default)]
    pub validation_dsc: Option<f64>,
    #[serde(default)]
    pub validation_soft_dice: Option<f64>,
    /// Standardization fitted on the training cases.
    #[serde(default)]
    pub intensity: Option<IntensityStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Number of completed epochs.
    pub epoch: usize,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct VelocityEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: Architecture,
    spec: NetworkSpec,
    reduction: usize,
    rng_seed: u64,
    epoch: usize,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerConfig>,
    velocity: Vec<VelocityEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let tensors: Vec<TensorEntry> = m
            .params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                frozen: p.frozen,
            })
            .collect();
        let velocity: Vec<VelocityEntry> = self
            .optimizer
            .iter()
            .flat_map(|o| o.velocity.iter())
            .map(|(name, v)| VelocityEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            arch: m.arch,
            spec: m.spec.clone(),
            reduction: m.reduction,
            rng_seed: m.params.rng_seed,
            epoch: self.epoch,
            meta: self.meta.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| o.config.clone()),
            velocity,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in m.params.iter() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(o) = &self.optimizer {
            for v in o.velocity.values().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing checkpoint magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12 + header_len;
        if bytes.len() < body {
            return Err(Error::format(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", header.version)));
        }
        header.spec.validate()?;
        let mut cursor = body;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + 8 * n;
            if bytes.len() < end {
                return Err(Error::format(path, "truncated tensor data"));
            }
            let out = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            Ok(out)
        };
        let mut params = ParamStore::default();
        params.rng_seed = header.rng_seed;
        for t in &header.tensors {
            let data = take(t.shape.iter().product())?;
            params.insert(
                t.name.clone(),
                Param {
                    shape: t.shape.clone(),
                    data,
                    frozen: t.frozen,
                },
            );
        }
        let optimizer = match header.optimizer {
            Some(config) => {
                let mut velocity = BTreeMap::new();
                for v in &header.velocity {
                    velocity.insert(v.name.clone(), take(v.len)?);
                }
                Some(OptimizerState { config, velocity })
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor data"));
        }
        let model = Model {
            arch: header.arch,
            spec: header.spec,
            params,
            reduction: header.reduction,
        };
        model.check_layout()?;
        Ok(Checkpoint {
            model,
            epoch: header.epoch,
            meta: header.meta,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
