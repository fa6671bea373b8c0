//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic "MFMCKPT1"
//! 8       4     u32 header length H
//! 12      H     UTF-8 JSON header
//! 12+H    8·N   f64 values of every tensor, concatenated in header order
//! ```
//!
//! The header is
//!
//! ```text
//! {"format_version":1,"config_hash":"<sha256 hex>","variant":"MFM",
//!  "steps_trained":N,"model":{"config":{...},"specs":[...],"task":{...}},
//!  "tensors":[{"name":"fusion.branch.0.gru.w_z","shape":[..]}, ...]}
//! ```
//!
//! `config_hash` is the SHA-256 of the compact JSON of `model`. Tensor
//! order is the parameter visit order of [`MfmModel`], so the same model
//! always produces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ModalitySpec, Task};
use crate::error::{MfmError, Result};
use crate::linalg::RngState;
use crate::model::{MfmModel, ModelConfig};
use crate::net::Params;

pub const MAGIC: &[u8; 8] = b"MFMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub config: ModelConfig,
    pub specs: Vec<ModalitySpec>,
    pub task: Task,
}

impl ModelDescriptor {
    pub fn of(model: &MfmModel) -> Self {
        ModelDescriptor {
            config: model.config.clone(),
            specs: model.specs.clone(),
            task: model.task,
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("descriptor serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config_hash: String,
    pub variant: String,
    pub steps_trained: u64,
    pub model: ModelDescriptor,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MfmModel) -> Vec<u8> {
    let desc = ModelDescriptor::of(model);
    let named = model.named();
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: desc.hash(),
        variant: model.variant().name().to_string(),
        steps_trained: model.steps_trained,
        model: desc,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + text.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(MfmError::Format("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| MfmError::Format("truncated checkpoint header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| MfmError::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(MfmError::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    if header.config_hash != header.model.hash() {
        return Err(MfmError::Format("checkpoint config hash does not match its config".into()));
    }
    Ok((header, 12 + len))
}

pub fn from_bytes(bytes: &[u8]) -> Result<MfmModel> {
    let (header, start) = read_header(bytes)?;
    let d = &header.model;
    // the skeleton's initial values are overwritten below
    let mut model = MfmModel::build(&d.config, &d.specs, d.task, &mut RngState::new(0))?;
    model.steps_trained = header.steps_trained;
    let mut slots = model.named_mut();
    if slots.len() != header.tensors.len() {
        return Err(MfmError::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    let mut pos = start;
    for ((name, t), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(MfmError::Format(format!(
                "tensor '{}' {:?} does not match expected '{}' {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
        let end = pos + 8 * t.len();
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| MfmError::Format(format!("truncated data for tensor '{name}'")))?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        pos = end;
    }
    if pos != bytes.len() {
        return Err(MfmError::Format(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
    }
    drop(slots);
    model.ensure_finite("checkpoint tensor")?;
    Ok(model)
}

pub fn save(path: &Path, model: &MfmModel) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| MfmError::io(path, e))
}

pub fn load(path: &Path) -> Result<MfmModel> {
    let bytes = fs::read(path).map_err(|e| MfmError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;

    fn model(variant: ModelVariant, seed: u64) -> MfmModel {
        let specs = vec![ModalitySpec::new("a", 3, 2), ModalitySpec::new("b", 2, 1)];
        let cfg = ModelConfig {
            variant,
            hidden: 6,
            depth: 1,
            ..ModelConfig::default()
        };
        MfmModel::build(&cfg, &specs, Task::Classification { classes: 3 }, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_exact_for_every_variant() {
        for v in ModelVariant::ALL {
            let mut m = model(v, 3);
            m.steps_trained = 17;
            let bytes = to_bytes(&m);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.checksum(), m.checksum());
            assert_eq!(back.steps_trained, 17);
            assert_eq!(back.config, m.config);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn layout_matches_documentation() {
        let m = model(ModelVariant::MFM, 1);
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..8], b"MFMCKPT1");
        let (header, start) = read_header(&bytes).unwrap();
        let n: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(bytes.len(), start + 8 * n);
        assert_eq!(n, m.param_count());
        let first = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        assert_eq!(first, m.named()[0].1.data()[0]);
        let oracle = hex::encode(Sha256::digest(serde_json::to_string(&header.model).unwrap()));
        assert_eq!(header.config_hash, oracle);
    }

    #[test]
    fn discriminative_only_variant_stores_no_decoders() {
        let (header, _) = read_header(&to_bytes(&model(ModelVariant::MB, 2))).unwrap();
        assert!(!header.tensors.is_empty());
        assert!(header.tensors.iter().all(|t| !t.name.starts_with("decoder")));
        let (full, _) = read_header(&to_bytes(&model(ModelVariant::MFM, 2))).unwrap();
        assert!(full.tensors.iter().any(|t| t.name.starts_with("decoder")));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model(ModelVariant::MFM, 4));
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes(&magic).is_err());
        // flip a hidden size inside the header without fixing the hash
        let text = String::from_utf8_lossy(&bytes[12..]).to_string();
        let pos = text.find("\"hidden\":6").unwrap() + 12;
        let mut tampered = bytes.clone();
        tampered[pos + 9] = b'7';
        assert!(matches!(from_bytes(&tampered), Err(MfmError::Format(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model(ModelVariant::ME, 5);
        save(&p, &m).unwrap();
        assert_eq!(load(&p).unwrap().checksum(), m.checksum());
        assert!(matches!(load(&dir.path().join("missing")), Err(MfmError::Io { .. })));
    }
}
