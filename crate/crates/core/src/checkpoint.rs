//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor (name, shape, dtype, byte offset and
//! length), the concatenated little-endian payloads, and a SHA-256 of all
//! preceding bytes. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Error as IoError, ErrorKind};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"TPCMATCH";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;
const TRAILER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint was written for configuration {found}, model has {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDtype {
    F32,
    F64,
}

impl StoredDtype {
    fn width(self) -> usize {
        match self {
            StoredDtype::F32 => 4,
            StoredDtype::F64 => 8,
        }
    }

    fn of(dtype: DType) -> Result<Self> {
        match dtype {
            DType::F32 => Ok(StoredDtype::F32),
            DType::F64 => Ok(StoredDtype::F64),
            other => Err(IoError::new(ErrorKind::InvalidInput, format!("unsupported dtype {other:?}")).into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: StoredDtype,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    pub step: u64,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Raw tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub dtype: StoredDtype,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dtype = StoredDtype::of(t.dtype())?;
        let flat = t.flatten_all()?;
        let bytes = match dtype {
            StoredDtype::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            StoredDtype::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        Ok(Self { shape: t.dims().to_vec(), dtype, bytes })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = match self.dtype {
            StoredDtype::F32 => {
                let v: Vec<f32> = self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            StoredDtype::F64 => {
                let v: Vec<f64> = self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
        };
        Ok(t)
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub header: Header,
    pub tensors: BTreeMap<String, TensorData>,
}

fn invalid(msg: impl Into<String>) -> CheckpointError {
    IoError::new(ErrorKind::InvalidData, msg.into()).into()
}

/// Serializes named tensors into the container format.
pub fn encode(config: &ModelConfig, step: u64, tensors: &[(String, TensorData)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: data.shape.clone(),
            dtype: data.dtype,
            offset,
            nbytes: data.bytes.len() as u64,
        });
        offset += data.bytes.len() as u64;
    }
    let header = Header { config_hash: config.config_hash(), step, model: config.clone(), tensors: entries };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header_bytes.len() + offset as usize + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, data) in tensors {
        out.extend_from_slice(&data.bytes);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses and verifies a container.
pub fn decode(bytes: &[u8]) -> Result<CheckpointState> {
    if bytes.len() < PREFIX_LEN + TRAILER_LEN {
        return Err(invalid("checkpoint is truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(invalid("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(invalid("checkpoint checksum mismatch (truncated or corrupted)"));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = PREFIX_LEN.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| invalid("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..payload_start])?;
    let payload = &body[payload_start..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        let expected = e.shape.iter().product::<usize>() * e.dtype.width();
        if len != expected || start.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(invalid(format!("tensor {} has an inconsistent extent", e.name)));
        }
        tensors.insert(
            e.name.clone(),
            TensorData { shape: e.shape.clone(), dtype: e.dtype, bytes: payload[start..start + len].to_vec() },
        );
    }
    Ok(CheckpointState { header, tensors })
}

fn collect_model(model: &Model, adam: Option<&Adam>) -> Result<Vec<(String, TensorData)>> {
    let mut out = Vec::new();
    for (name, var) in model.store.params() {
        out.push((format!("param/{name}"), TensorData::from_tensor(var.as_tensor())?));
    }
    for (name, var) in model.store.buffers() {
        out.push((format!("buffer/{name}"), TensorData::from_tensor(var.as_tensor())?));
    }
    if let Some(adam) = adam {
        for (k, name) in adam.names.iter().enumerate() {
            out.push((format!("adam.m/{name}"), TensorData::from_tensor(&adam.m[k])?));
            out.push((format!("adam.v/{name}"), TensorData::from_tensor(&adam.v[k])?));
        }
    }
    Ok(out)
}

/// Writes parameters, buffers and (optionally) optimizer moments.
pub fn save_checkpoint(path: &Path, model: &Model, adam: Option<&Adam>, step: u64) -> Result<()> {
    let bytes = encode(&model.cfg, step, &collect_model(model, adam)?)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    decode(&fs::read(path)?)
}

fn set_var(var: &Var, name: &str, state: &CheckpointState) -> Result<()> {
    let data = state.tensors.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
    if data.shape != var.dims() {
        return Err(CheckpointError::Shape { name: name.to_string(), expected: var.dims().to_vec(), found: data.shape.clone() });
    }
    var.set(&data.to_tensor()?.to_dtype(var.dtype())?)?;
    Ok(())
}

/// Copies parameters and buffers into `model`. A configuration mismatch is
/// an error unless `force` is set.
pub fn restore_model(model: &Model, state: &CheckpointState, force: bool) -> Result<()> {
    let expected = model.cfg.config_hash();
    if !force && state.header.config_hash != expected {
        return Err(CheckpointError::ConfigHashMismatch { expected, found: state.header.config_hash.clone() });
    }
    for (name, var) in model.store.params() {
        set_var(var, &format!("param/{name}"), state)?;
    }
    for (name, var) in model.store.buffers() {
        set_var(var, &format!("buffer/{name}"), state)?;
    }
    Ok(())
}

/// Restores optimizer moments and the step counter.
pub fn restore_optimizer(adam: &mut Adam, state: &CheckpointState) -> Result<()> {
    for (k, name) in adam.names.iter().enumerate() {
        for (slot, prefix) in [(&mut adam.m[k], "adam.m"), (&mut adam.v[k], "adam.v")] {
            let key = format!("{prefix}/{name}");
            let data = state.tensors.get(&key).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
            *slot = data.to_tensor()?;
        }
    }
    adam.step = state.header.step;
    Ok(())
}

/// Builds a model from the configuration stored in the checkpoint.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model, CheckpointState)> {
    let state = load_checkpoint(path)?;
    let model = Model::new(state.header.model.clone(), 0)?;
    restore_model(&model, &state, false)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topic_matcher::Variant;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::tiny(Variant::Fast);
        cfg.backbone.stages = [4, 8, 8];
        cfg.backbone.fine = 4;
        cfg.matcher.num_topics = 4;
        cfg.matcher.k_covis = 2;
        cfg.matcher.attention_heads = 2;
        cfg.fine.token_hidden = 4;
        cfg.fine.channel_hidden = 4;
        cfg
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::new(tiny(), 1).unwrap();
        let bytes = encode(&model.cfg, 7, &collect_model(&model, None).unwrap()).unwrap();
        let state = decode(&bytes).unwrap();
        assert_eq!(state.header.step, 7);
        let other = Model::new(tiny(), 2).unwrap();
        restore_model(&other, &state, false).unwrap();
        for (name, var) in model.store.params() {
            let a = TensorData::from_tensor(var.as_tensor()).unwrap();
            let b = TensorData::from_tensor(other.store.get(name).unwrap().as_tensor()).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let model = Model::new(tiny(), 1).unwrap();
        let bytes = encode(&model.cfg, 0, &collect_model(&model, None).unwrap()).unwrap();
        let err = decode(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, CheckpointError::Io(ref e) if e.kind() == ErrorKind::InvalidData));
        let mut tampered = bytes.clone();
        tampered[8] = 9;
        assert!(matches!(decode(&tampered), Err(CheckpointError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let model = Model::new(tiny(), 1).unwrap();
        let state = decode(&encode(&model.cfg, 0, &collect_model(&model, None).unwrap()).unwrap()).unwrap();
        let mut cfg = tiny();
        cfg.backbone.fine = 8;
        let other = Model::new(cfg, 1).unwrap();
        assert!(matches!(restore_model(&other, &state, false), Err(CheckpointError::ConfigHashMismatch { .. })));
    }
}
