//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (config, vocabulary, tensor table, metadata), then every tensor as
//! little-endian f64 in table order. Reloads are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::vocab::Vocab;
use super::{ApeModel, ModelConfig, ModelMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub mode: ModelMode,
    pub qe_heads: bool,
    pub adapters: bool,
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Writes `model` to `path` atomically (temp file, then rename).
pub fn save_checkpoint(model: &ApeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let p = &model.params;
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        mode: model.mode,
        qe_heads: model.qe_heads,
        adapters: model.adapters,
        metadata: model.metadata.clone(),
        tensors: p
            .ids()
            .map(|id| TensorEntry {
                name: p.name(id).to_string(),
                rows: p.value(id).nrows(),
                cols: p.value(id).ncols(),
                trainable: p.is_trainable(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + p.numel() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for id in p.ids() {
        for v in p.value(id).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ApeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut offset = 20 + hlen;
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != offset + expected {
        return Err(corrupt(&format!(
            "expected {} tensor bytes, found {}",
            expected,
            bytes.len() - offset
        )));
    }
    let mut params = ParamStore::default();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let data: Vec<f64> = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        let value = Array2::from_shape_vec((t.rows, t.cols), data).map_err(|e| corrupt(&e.to_string()))?;
        let id = params.add(t.name.clone(), value);
        params.set_trainable(id, t.trainable);
    }
    header.config.validate()?;
    Ok(ApeModel::from_parts(
        header.config,
        header.vocab,
        params,
        header.mode,
        header.qe_heads,
        header.adapters,
        header.metadata,
    ))
}

/// Outcome of copying parameters from a donor model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub loaded: Vec<String>,
    /// Present in both with different shapes; left at their init.
    pub mismatched: Vec<String>,
    /// Present in the target only.
    pub missing: Vec<String>,
}

impl ApeModel {
    /// Copies every same-named, same-shaped parameter from `donor`. In strict
    /// mode any shape mismatch or vocabulary difference is an error.
    pub fn init_from(&mut self, donor: &ApeModel, strict: bool) -> Result<InitReport> {
        if donor.vocab != self.vocab && strict {
            return Err(Error::Config("donor vocabulary differs".into()));
        }
        let mut report = InitReport::default();
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            match donor.params.id(&name) {
                Some(did) if donor.params.value(did).dim() == self.params.value(id).dim() => {
                    *self.params.value_mut(id) = donor.params.value(did).clone();
                    report.loaded.push(name);
                }
                Some(_) => report.mismatched.push(name),
                None => report.missing.push(name),
            }
        }
        if strict && !report.mismatched.is_empty() {
            return Err(Error::Config(format!(
                "incompatible parameter shapes: {}",
                report.mismatched.join(", ")
            )));
        }
        Ok(report)
    }

    pub fn init_from_checkpoint(&mut self, path: impl AsRef<Path>, strict: bool) -> Result<InitReport> {
        let path = path.as_ref();
        let donor = load_checkpoint(path)?;
        let report = self.init_from(&donor, strict)?;
        self.metadata.insert("init_from".into(), path.display().to_string());
        Ok(report)
    }
}
