//! Checkpoint files: `CDPLNET1`, a little-endian `u64` header length, a JSON
//! header (version, config, tensor directory), then the raw tensor payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CDPLNET1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.parameters() {
            tensors.push(Entry {
                name,
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(corrupt(format!(
                "{} bytes is shorter than the preamble",
                bytes.len()
            )));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing CDPLNET1 magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(corrupt(format!(
                "header claims {header_len} bytes, {} present",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let payload = &body[header_len..];
        let mut model = Model::<T>::build(&header.config)?;
        let expected: usize = model
            .parameters()
            .iter()
            .map(|(_, t)| t.len() * T::BYTES)
            .sum();
        if payload.len() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut params = model.parameters_mut();
        if params.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "{} tensors listed, model has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for (param, entry) in params.iter_mut().zip(&header.tensors) {
            if entry.name != param.name {
                return Err(corrupt(format!(
                    "expected tensor {}, found {}",
                    param.name, entry.name
                )));
            }
            if entry.dtype != T::DTYPE {
                return Err(corrupt(format!(
                    "{}: dtype {} but loading as {}",
                    entry.name,
                    entry.dtype,
                    T::DTYPE
                )));
            }
            if entry.shape != param.value.shape() {
                return Err(corrupt(format!(
                    "{}: shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    param.value.shape()
                )));
            }
            let end = entry.offset + param.value.len() * T::BYTES;
            let raw = payload
                .get(entry.offset..end)
                .ok_or_else(|| corrupt(format!("{}: payload out of range", entry.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            *param.value = Tensor::new(&entry.shape, data)?;
        }
        drop(params);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint whose architecture must agree with `config`; the
    /// recipe fields of `config` (seed, lr, ...) replace the stored ones.
    pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<Self> {
        let mut model = Self::load(path)?;
        model.set_config(config.clone())?;
        Ok(model)
    }
}
