//! Single-file checkpoint format.
//!
//! ```text
//! "MRLT" | version u32 LE | header length u64 LE | header (UTF-8 JSON) | payload | crc32 u32 LE
//! ```
//!
//! The header holds the model config, the class names and a table of
//! `{name, shape, offset}` entries; `offset` is the byte position of the
//! tensor inside the payload. The payload is every tensor's values as
//! little-endian f32, back to back in table order. The trailing CRC-32
//! covers every byte before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_layout, ModelConfig, ModelError, ParameterSet};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"MRLT";
pub const VERSION: u32 = 1;

/// Parameters plus the names of the classes behind the logit columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    classes: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Corrupt(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParameterSet, classes: Vec<String>) -> Result<Self, ModelError> {
        if classes.len() != params.config().n_classes {
            return Err(ModelError::Contract(format!(
                "{} class names for a {}-class head",
                classes.len(),
                params.config().n_classes
            )));
        }
        Ok(Self { params, classes })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.params.config().clone(),
            classes: self.classes.clone(),
            tensors,
            payload_bytes: offset,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 20 {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let (bytes, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(bytes).to_le_bytes() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = &bytes[16..];
        if header_len > rest.len() as u64 {
            return Err(corrupt(format!(
                "header length {header_len} exceeds remaining {} bytes",
                rest.len()
            )));
        }
        let (header, payload) = rest.split_at(header_len as usize);
        let header: Header =
            serde_json::from_slice(header).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| corrupt(format!("header config: {e}")))?;
        if header.payload_bytes != payload.len() as u64 {
            return Err(corrupt(format!(
                "header declares {} payload bytes, file has {}",
                header.payload_bytes,
                payload.len()
            )));
        }
        let layout = tensor_layout(&header.config);
        if layout.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "config needs {} tensors, table lists {}",
                layout.len(),
                header.tensors.len()
            )));
        }
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape || entry.offset != offset {
                return Err(corrupt(format!(
                    "table entry {} {:?} @{} does not match expected {name} {shape:?} @{offset}",
                    entry.name, entry.shape, entry.offset
                )));
            }
            let n = shape.iter().product::<usize>();
            let end = offset + 4 * n as u64;
            if end > payload.len() as u64 {
                return Err(corrupt(format!("tensor {name} runs past the payload")));
            }
            let data = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?);
            offset = end;
        }
        if offset != payload.len() as u64 {
            return Err(corrupt("tensor table does not cover the payload"));
        }
        let params = ParameterSet::from_tensors(header.config, tensors)?;
        Checkpoint::new(params, header.classes).map_err(|e| corrupt(e.to_string()))
    }

    /// Writes through a temporary sibling file so a crash never leaves a
    /// truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(params: &ParameterSet, classes: &[String], path: &Path) -> Result<(), ModelError> {
    Checkpoint::new(params.clone(), classes.to_vec())?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path)
}
