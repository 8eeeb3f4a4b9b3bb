//! Binary checkpoint: a JSON manifest followed by a little-endian `f32`
//! payload holding every stored array, running statistics included.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic  b"BNRCKPT\0"
//! bytes 8..12   format version, u32 LE
//! bytes 12..20  manifest length M, u64 LE
//! bytes 20..20+M  manifest, UTF-8 JSON
//! then          payload, f32 LE, arrays back to back in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{build, Architecture, Model, ParamKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BNRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// How a checkpoint came to be.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Training configuration name, or `init` for an untrained model.
    pub config_name: String,
    pub plus_logit: bool,
    pub plus_conv1: bool,
    pub model_seed: u64,
    pub train_seed: u64,
    pub epochs: usize,
    pub adversarial: bool,
    /// SHA-256 (hex) of the checkpoint this one was fine-tuned from.
    pub base_sha256: Option<String>,
    /// Free-form additions (dataset, ε, ...).
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub params: Vec<ParamRecord>,
    pub provenance: Provenance,
}

/// An in-memory checkpoint: manifest plus decoded payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, provenance: Provenance) -> Self {
        let mut params = Vec::with_capacity(model.arrays().len());
        let mut payload = Vec::new();
        for a in model.arrays() {
            params.push(ParamRecord {
                name: a.name.clone(),
                kind: a.kind,
                shape: a.tensor.shape().to_vec(),
                offset: payload.len() * 4,
            });
            payload.extend_from_slice(a.tensor.data());
        }
        Checkpoint {
            manifest: Manifest {
                format_version: CHECKPOINT_VERSION,
                architecture: model.architecture().clone(),
                params,
                provenance,
            },
            payload,
        }
    }

    /// Rebuilds the model the checkpoint describes, in eval mode.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = build(&self.manifest.architecture, 0)
            .map_err(|e| Error::Checkpoint(format!("unusable architecture: {e}")))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Overwrites every array of `model`, which must have exactly the
    /// recorded architecture and array layout.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if model.architecture() != &self.manifest.architecture {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint holds {:?}, model is {:?}",
                self.manifest.architecture,
                model.architecture()
            )));
        }
        if model.arrays().len() != self.manifest.params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {} arrays, model {}",
                self.manifest.params.len(),
                model.arrays().len()
            )));
        }
        for (a, rec) in model.arrays_mut().iter_mut().zip(&self.manifest.params) {
            if a.name != rec.name || a.kind != rec.kind || a.tensor.shape() != rec.shape.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "array `{}` {:?} does not match checkpoint record `{}` {:?}",
                    a.name,
                    a.tensor.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            let start = rec.offset / 4;
            let len = a.tensor.numel();
            a.tensor.data_mut().copy_from_slice(&self.payload[start..start + len]);
        }
        model.set_mode(crate::nn::Mode::Eval);
        Ok(())
    }

    /// Payload values of one named array.
    pub fn array(&self, name: &str) -> Option<&[f32]> {
        self.manifest.params.iter().find(|r| r.name == name).map(|r| {
            let n: usize = r.shape.iter().product();
            &self.payload[r.offset / 4..r.offset / 4 + n]
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + self.payload.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.manifest.format_version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is too short for a header", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(HEADER_LEN))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("manifest length {mlen} exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..mend])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest and header versions disagree".into()));
        }
        let body = &bytes[mend..];
        if body.len() % 4 != 0 {
            return Err(bad(format!("payload length {} is not a multiple of 4", body.len())));
        }
        let payload: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut expected = 0usize;
        for rec in &manifest.params {
            if rec.offset != expected * 4 {
                return Err(bad(format!("array `{}` at byte {} leaves a gap or overlap", rec.name, rec.offset)));
            }
            expected += rec.shape.iter().product::<usize>();
        }
        if expected != payload.len() {
            return Err(bad(format!(
                "manifest describes {expected} values, payload holds {}",
                payload.len()
            )));
        }
        Ok(Checkpoint { manifest, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the serialized bytes, lowercase hex.
    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
