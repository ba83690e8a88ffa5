//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   "NDCK"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `CheckpointHeader`)
//! digest       32 bytes  SHA-256 of the header bytes
//! param_count  u32
//! per parameter:
//!   name_len   u16, then name bytes (UTF-8)
//!   ndim       u8, then ndim × u32 dims
//!   data       numel × f32
//! ```
//!
//! Parameters are written in registration order, so saving a loaded
//! checkpoint reproduces the original file byte for byte.

use std::path::Path;

use normdiff_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{AgeNorm, AgeRegressor, Hdae, ModelConfig};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hdae,
    AgeRegressor,
}

/// How the stored parameters were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
    /// Subjects whose images the parameters were fitted on.
    pub subject_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Present for diffusion models only.
    pub schedule: Option<NoiseSchedule>,
    pub age_norm: AgeNorm,
    pub training: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

fn collect(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect()
}

fn restore(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if store.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, architecture expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Data(format!("unexpected parameter {name} in checkpoint")))?;
        let slot = store.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::Data(format!(
                "parameter {name} has shape {:?}, architecture expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
    }
    Ok(())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_hdae(model: &Hdae, training: TrainingMeta) -> Self {
        Self {
            header: CheckpointHeader {
                kind: ModelKind::Hdae,
                model: model.config().clone(),
                schedule: Some(model.schedule().clone()),
                age_norm: model.age_norm(),
                training,
            },
            params: collect(model.params()),
        }
    }

    pub fn from_regressor(model: &AgeRegressor, training: TrainingMeta) -> Self {
        Self {
            header: CheckpointHeader {
                kind: ModelKind::AgeRegressor,
                model: model.config().clone(),
                schedule: None,
                age_norm: model.age_norm(),
                training,
            },
            params: collect(model.params()),
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Data(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_hdae(&self) -> Result<Hdae> {
        self.expect_kind(ModelKind::Hdae)?;
        let schedule = self
            .header
            .schedule
            .clone()
            .ok_or_else(|| Error::Data("diffusion checkpoint without a noise schedule".into()))?;
        let mut model = Hdae::new(self.header.model.clone(), schedule, self.header.age_norm, 0)?;
        restore(model.params_mut(), &self.params)?;
        Ok(model)
    }

    pub fn to_regressor(&self) -> Result<AgeRegressor> {
        self.expect_kind(ModelKind::AgeRegressor)?;
        let mut model = AgeRegressor::new(self.header.model.clone(), self.header.age_norm, 0)?;
        restore(model.params_mut(), &self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Data(format!("cannot serialise checkpoint header: {e}")))?;
        let numel: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(64 + header.len() + 4 * numel);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = r.u32()? as usize;
        let header_bytes = r.take(header_len)?;
        let digest = r.take(32)?;
        if Sha256::digest(header_bytes).as_slice() != digest {
            return Err(Error::Data("checkpoint header digest mismatch".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
                Error::Data(format!("parameter {name} is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint parameters",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Digest of the serialised checkpoint, used to bind derived artifacts to it.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}
