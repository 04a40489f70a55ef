//! Safetensors checkpoints. Tensors are stored under `model.*` and `optim.*`;
//! everything else (format version, run configuration, counters, metric
//! history) lives as JSON in a single metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "hazekit";
const MODEL_PREFIX: &str = "model.";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Dhr,
    Ahg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub epoch: u64,
    pub config: RunConfig,
    /// One JSON object per logged step.
    pub history: Vec<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn ckpt_err(what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(what.to_string())
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: RunConfig) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind,
                step: 0,
                epoch: 0,
                config,
                history: Vec::new(),
            },
            model: BTreeMap::new(),
            optimizer: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        let metadata = HashMap::from([(HEADER_KEY.to_string(), header)]);
        let tensors: Vec<(String, &Tensor)> = self
            .model
            .iter()
            .map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v))
            .chain(self.optimizer.iter().map(|(k, v)| (format!("{OPTIM_PREFIX}{k}"), v)))
            .collect();
        safetensors::serialize(tensors, Some(metadata)).map_err(ckpt_err)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| ckpt_err("missing checkpoint header; not a hazekit checkpoint"))?;
        let version: serde_json::Value = serde_json::from_str(text)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(ckpt_err(format!(
                    "checkpoint format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(ckpt_err("checkpoint header has no format version")),
        }
        let header: CheckpointHeader = serde_json::from_str(text).map_err(ckpt_err)?;
        let mut out = Self {
            header,
            model: BTreeMap::new(),
            optimizer: BTreeMap::new(),
        };
        for (name, tensor) in candle_core::safetensors::load_buffer(bytes, device)? {
            if let Some(k) = name.strip_prefix(MODEL_PREFIX) {
                out.model.insert(k.to_string(), tensor);
            } else if let Some(k) = name.strip_prefix(OPTIM_PREFIX) {
                out.optimizer.insert(k.to_string(), tensor);
            } else {
                return Err(ckpt_err(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint and checks it holds the expected model kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: CheckpointKind, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Self::load(path, device)?;
        if ckpt.header.kind != kind {
            return Err(ckpt_err(format!(
                "{} holds a {:?} checkpoint, expected {kind:?}",
                path.display(),
                ckpt.header.kind
            )));
        }
        Ok(ckpt)
    }
}
