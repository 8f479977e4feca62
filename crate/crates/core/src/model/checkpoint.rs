use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Normalizer;
use super::{Group, MsctConfig, MsctModel, Stage};
use crate::error::{MsctError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSCTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub stage: Stage,
    pub group: Group,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: MsctConfig,
    pub normalizer: Normalizer,
    /// Hex digest of the training configuration that produced the weights.
    pub train_config_hash: String,
    /// Epochs actually run per stage (encoder, decoder).
    pub epochs: Vec<usize>,
    pub params: Vec<ParamEntry>,
}

impl MsctModel {
    pub fn checkpoint_header(&self, train_config_hash: &str, epochs: &[usize]) -> CheckpointHeader {
        CheckpointHeader {
            kind: "msct".into(),
            config: self.cfg.clone(),
            normalizer: self.norm,
            train_config_hash: train_config_hash.into(),
            epochs: epochs.to_vec(),
            params: self
                .store
                .ids()
                .map(|id| {
                    let (stage, group) = self.group_of(id);
                    ParamEntry {
                        name: self.store.name(id).into(),
                        stage,
                        group,
                        shape: self.store.get(id).shape().to_vec(),
                    }
                })
                .collect(),
        }
    }

    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
    /// then every parameter's values as f64 LE in header order.
    pub fn to_checkpoint_bytes(&self, train_config_hash: &str, epochs: &[usize]) -> Result<Vec<u8>> {
        let header = self.checkpoint_header(train_config_hash, epochs);
        let json = serde_json::to_vec(&header).map_err(|e| MsctError::json("<checkpoint>", e))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.store.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in self.store.ids() {
            for v in self.store.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let bad = |m: &str| MsctError::Data(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).filter(|b| b.len() >= hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| MsctError::json("<checkpoint>", e))?;
        if header.kind != "msct" {
            return Err(bad(&format!("unexpected kind {}", header.kind)));
        }
        let mut model = MsctModel::new(header.config.clone(), 0)?;
        model.norm = header.normalizer;
        if header.params.len() != model.store.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        let mut payload = &body[hlen..];
        for entry in &header.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
            if model.group_of(id) != (entry.stage, entry.group) {
                return Err(bad(&format!("group mismatch for {}", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(bad("truncated payload"));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
            payload = &payload[8 * n..];
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok((model, header))
    }
}

pub fn save_checkpoint(path: &Path, model: &MsctModel, train_config_hash: &str, epochs: &[usize]) -> Result<()> {
    let bytes = model.to_checkpoint_bytes(train_config_hash, epochs)?;
    fs::write(path, bytes).map_err(|e| MsctError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(MsctModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| MsctError::io(path, e))?;
    MsctModel::from_checkpoint_bytes(&bytes)
}
