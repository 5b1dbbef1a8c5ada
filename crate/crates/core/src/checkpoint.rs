//! Single-file checkpoints: magic, manifest length, JSON manifest, float32 payloads.
//!
//! Layout (little-endian):
//! `b"SSWCKPT1"`, `u64` manifest byte length, UTF-8 JSON manifest, then each
//! tensor's values as IEEE-754 `f32` at the byte offset the manifest records
//! (relative to the start of the payload section).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::optim::{AdamW, OptimState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSWCKPT1";
const MOMENT_M: &str = "optimizer.m.";
const MOMENT_V: &str = "optimizer.v.";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimEntry {
    hyper: AdamW,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    model: ModelKind,
    step: u64,
    #[serde(default)]
    optimizer: Option<OptimEntry>,
    tensors: Vec<TensorEntry>,
}

/// A model plus the training state needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimState>,
    /// Completed training steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Tensor)> = self.model.params.iter().map(|(n, t)| (n.to_owned(), t)).collect();
        if let Some(opt) = &self.optimizer {
            named.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)));
            named.extend(opt.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)));
        }
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.model.cfg.clone(),
            model: self.model.kind.clone(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimEntry {
                hyper: o.hyper,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Format(format!("manifest of {len} bytes truncated")))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let payload = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut opt = manifest.optimizer.as_ref().map(|o| OptimState {
            hyper: o.hyper,
            step: o.step,
            ..OptimState::new(o.hyper)
        });
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload.get(start..end).ok_or_else(|| {
                Error::Format(format!(
                    "tensor `{}` needs bytes {start}..{end}, payload has {}",
                    e.name,
                    payload.len()
                ))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(e.shape.clone(), data);
            if let Some(name) = e.name.strip_prefix(MOMENT_M) {
                opt.as_mut().ok_or_else(missing_opt)?.m.insert(name.to_owned(), t);
            } else if let Some(name) = e.name.strip_prefix(MOMENT_V) {
                opt.as_mut().ok_or_else(missing_opt)?.v.insert(name.to_owned(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let model = Model::from_params(manifest.config, manifest.model, params)?;
        Ok(Self {
            model,
            optimizer: opt,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn missing_opt() -> Error {
    Error::Format("optimizer moments present without optimizer state".into())
}
