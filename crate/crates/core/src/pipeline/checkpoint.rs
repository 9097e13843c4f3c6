//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header naming every tensor, the tensors as little-endian `f64` in header
//! order, and a SHA-256 of everything before it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use gdetr_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::StageId;
use super::ema::EmaState;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GDETRCKP";
const DIGEST_LEN: usize = 32;

/// Training state at the end of a stage (or any iteration).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageId,
    pub iteration: u64,
    /// Hash of the run config that produced this checkpoint.
    pub config_hash: String,
    /// The run config as TOML.
    pub config: String,
    /// Parameters in model order.
    pub params: Vec<(String, Tensor)>,
    pub ema: Option<EmaState>,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: StageId,
    iteration: u64,
    config_hash: String,
    config: String,
    ema_decay: Option<f64>,
    adam: Option<AdamHeader>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Ema,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    section: Section,
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Snapshot of the live parameters in `store`.
    pub fn capture(stage: StageId, iteration: u64, config: String, config_hash: String, store: &ParamStore) -> Self {
        Self {
            stage,
            iteration,
            config_hash,
            config,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            ema: None,
            optimizer: None,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(Section, &str, &Tensor)> =
            self.params.iter().map(|(n, t)| (Section::Param, n.as_str(), t)).collect();
        if let Some(e) = &self.ema {
            tensors.extend(e.shadow.iter().map(|(n, t)| (Section::Ema, n.as_str(), t)));
        }
        if let Some(o) = &self.optimizer {
            tensors.extend(o.m.iter().map(|(n, t)| (Section::AdamM, n.as_str(), t)));
            tensors.extend(o.v.iter().map(|(n, t)| (Section::AdamV, n.as_str(), t)));
        }
        let header = Header {
            stage: self.stage,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            ema_decay: self.ema.as_ref().map(|e| e.decay),
            adam: self.optimizer.as_ref().map(|o| AdamHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }),
            tensors: tensors
                .iter()
                .map(|(s, n, t)| Entry {
                    section: *s,
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 8 * tensors.iter().map(|t| t.2.numel()).sum::<usize>() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 20 + DIGEST_LEN {
            return Err(corrupt("file is truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let mut data = &body[header_end..];
        let mut sections: BTreeMap<Section, Vec<(String, Tensor)>> = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(corrupt("tensor data overruns file"));
            }
            let (chunk, rest) = data.split_at(8 * n);
            data = rest;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            sections
                .entry(e.section)
                .or_default()
                .push((e.name, Tensor::new(e.shape, values)));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        let mut take = |s: Section| sections.remove(&s).unwrap_or_default();
        let params = take(Section::Param);
        let ema = header.ema_decay.map(|decay| EmaState {
            decay,
            shadow: take(Section::Ema).into_iter().collect(),
        });
        let optimizer = header.adam.map(|a| AdamW {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            step: a.step,
            m: take(Section::AdamM).into_iter().collect(),
            v: take(Section::AdamV).into_iter().collect(),
        });
        Ok(Self {
            stage: header.stage,
            iteration: header.iteration,
            config_hash: header.config_hash,
            config: header.config,
            params,
            ema,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Which parameters a load filled, left alone, or ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Model parameters copied from the checkpoint.
    pub loaded: Vec<String>,
    /// Model parameters absent from the checkpoint, left as initialized.
    pub fresh: Vec<String>,
    /// Checkpoint entries the model has no parameter for.
    pub unused: Vec<String>,
}

/// Copies matching entries into `store`. Every parameter for which
/// `required` holds must be present. Nothing is modified on error.
pub fn load_params(store: &mut ParamStore, entries: &[(String, Tensor)], required: impl Fn(&str) -> bool) -> Result<LoadReport> {
    let available: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let missing: Vec<String> = store
        .names()
        .iter()
        .filter(|n| required(n) && !available.contains_key(n.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        match available.get(name) {
            Some(t) if t.shape() != store.get(id).shape() => {
                return Err(Error::InvalidState(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            Some(t) => {
                report.loaded.push(name.to_string());
                updates.push((id, (*t).clone()));
            }
            None => report.fresh.push(name.to_string()),
        }
    }
    let known: BTreeSet<&str> = store.names().iter().map(String::as_str).collect();
    report.unused = entries
        .iter()
        .filter(|(n, _)| !known.contains(n.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    for (id, t) in updates {
        *store.get_mut(id) = t;
    }
    Ok(report)
}
