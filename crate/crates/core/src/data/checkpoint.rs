//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `FVCK`                             |
//! | 4     | version (u32, currently 1)               |
//! | 4     | header length `H` in bytes (u32)         |
//! | H     | UTF-8 JSON header                        |
//! | rest  | f32 payload, tensors in header order     |
//!
//! The header holds `config` (an opaque JSON echo of the training config),
//! `tensors` (name and shape per entry) and an optional `optimizer` block
//! (`step` and AdamW hyper-parameters). Optimizer moments are stored as
//! ordinary entries named `adamw.m/<param>` and `adamw.v/<param>`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};
use crate::tensor::{AdamWConfig, OptimState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT_PREFIX: &str = "adamw.m/";
const SECOND_MOMENT_PREFIX: &str = "adamw.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_tensor(name: String, t: &Tensor) -> Self {
        Self {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape validated on decode")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub config: AdamWConfig,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct HeaderOptimizer {
    step: u64,
    adamw: AdamWConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<HeaderEntry>,
    #[serde(default)]
    optimizer: Option<HeaderOptimizer>,
}

impl Checkpoint {
    pub fn from_params(
        params: &ParamStore,
        state: Option<&OptimState>,
        config: serde_json::Value,
    ) -> Result<Self, DataError> {
        if params.is_empty() {
            return Err(DataError::Checkpoint("empty parameter table".into()));
        }
        let named = |prefix: &str, ts: &[Tensor]| -> Vec<NamedTensor> {
            params
                .iter()
                .zip(ts)
                .map(|((n, _), t)| NamedTensor::from_tensor(format!("{prefix}{n}"), t))
                .collect()
        };
        Ok(Self {
            config,
            params: named("", params.values()),
            optimizer: state.map(|s| OptimizerSnapshot {
                step: s.step,
                config: s.config,
                first_moment: named(FIRST_MOMENT_PREFIX, &s.first_moment),
                second_moment: named(SECOND_MOMENT_PREFIX, &s.second_moment),
            }),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        if self.params.is_empty() {
            return Err(DataError::Checkpoint("empty parameter table".into()));
        }
        let all: Vec<&NamedTensor> = self.all_tensors().collect();
        let header = Header {
            config: self.config.clone(),
            tensors: all
                .iter()
                .map(|t| HeaderEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| HeaderOptimizer {
                step: o.step,
                adamw: o.config,
            }),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in all {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(DataError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(DataError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(DataError::Truncated);
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut seen = HashSet::new();
        for entry in header.tensors {
            if !seen.insert(entry.name.clone()) {
                return Err(DataError::Checkpoint(format!(
                    "duplicate tensor name {}",
                    entry.name
                )));
            }
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(DataError::Truncated);
            }
            let data: Vec<f32> = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(i));
            }
            payload = &payload[n * 4..];
            let t = NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            };
            if t.name.starts_with(FIRST_MOMENT_PREFIX) {
                first.push(t);
            } else if t.name.starts_with(SECOND_MOMENT_PREFIX) {
                second.push(t);
            } else {
                params.push(t);
            }
        }
        if !payload.is_empty() {
            return Err(DataError::TrailingBytes);
        }
        if params.is_empty() {
            return Err(DataError::Checkpoint("empty parameter table".into()));
        }
        let optimizer = match header.optimizer {
            Some(o) => Some(OptimizerSnapshot {
                step: o.step,
                config: o.adamw,
                first_moment: first,
                second_moment: second,
            }),
            None if first.is_empty() && second.is_empty() => None,
            None => {
                return Err(DataError::Checkpoint(
                    "moment tensors without optimizer block".into(),
                ))
            }
        };
        Ok(Self {
            config: header.config,
            params,
            optimizer,
        })
    }

    fn all_tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        let opt = self
            .optimizer
            .iter()
            .flat_map(|o| o.first_moment.iter().chain(o.second_moment.iter()));
        self.params.iter().chain(opt)
    }

    /// Copies stored values into `params`, which fixes the expected names
    /// and shapes. Shape disagreements are reported before missing names,
    /// and missing names before unknown ones.
    pub fn restore_params(&self, params: &mut ParamStore) -> Result<(), DataError> {
        let restored = restore_table(&self.params, "", params)?;
        for (dst, src) in params.values_mut().iter_mut().zip(restored) {
            *dst = src;
        }
        Ok(())
    }

    /// Rebuilds the optimizer state for `params`, if one was saved.
    pub fn restore_optimizer(&self, params: &ParamStore) -> Result<Option<OptimState>, DataError> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let first = restore_table(&snap.first_moment, FIRST_MOMENT_PREFIX, params)?;
        let second = restore_table(&snap.second_moment, SECOND_MOMENT_PREFIX, params)?;
        Ok(Some(OptimState {
            config: snap.config,
            step: snap.step,
            first_moment: first,
            second_moment: second,
        }))
    }
}

fn restore_table(
    stored: &[NamedTensor],
    prefix: &str,
    params: &ParamStore,
) -> Result<Vec<Tensor>, DataError> {
    let find = |name: &str| stored.iter().find(|t| t.name == format!("{prefix}{name}"));
    for (name, value) in params.iter() {
        if let Some(t) = find(name) {
            if t.shape != value.shape() {
                return Err(DataError::ShapeMismatch {
                    name: name.to_string(),
                    stored: t.shape.clone(),
                    expected: value.shape().to_vec(),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(params.len());
    for (name, _) in params.iter() {
        match find(name) {
            Some(t) => out.push(t.to_tensor()),
            None => {
                return Err(DataError::Checkpoint(format!(
                    "missing parameter {prefix}{name}"
                )))
            }
        }
    }
    if let Some(extra) = stored
        .iter()
        .find(|t| params.id(&t.name[prefix.len()..]).is_none())
    {
        return Err(DataError::Checkpoint(format!(
            "unknown parameter {}",
            extra.name
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes)
}
