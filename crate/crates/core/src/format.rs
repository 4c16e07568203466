//! `AGDW` weight file.
//!
//! ```text
//! "AGDW" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is `{config, tensors: [{name, shape, offset}]}`; offsets are in
//! bytes from the start of the payload, which holds every tensor as
//! row-major little-endian `f32`, tightly packed in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"AGDW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in model.tensors() {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
        });
        for &x in data {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: model.config.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("incomplete preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| Error::Header("header length overflow".into()))?)
        .ok_or_else(|| Error::Header("header length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes, only {} available",
            bytes.len() - 16
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    header.config.validate()?;

    let layout = Model::<f32>::expected_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(Error::Header(format!(
            "expected {} tensors for this config, header lists {}",
            layout.len(),
            header.tensors.len()
        )));
    }
    let payload = &bytes[header_end..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.into_iter().zip(&header.tensors) {
        if entry.name != name {
            return Err(Error::Header(format!(
                "tensor order: expected {name}, found {}",
                entry.name
            )));
        }
        if entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        if entry.offset != expected_offset {
            return Err(Error::Header(format!(
                "tensor {name}: offset {} is not tightly packed (expected {expected_offset})",
                entry.offset
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if payload.len() < end {
            return Err(Error::Truncated(format!(
                "tensor {name} needs payload bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        tensors.push(
            payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect::<Vec<f32>>(),
        );
        expected_offset = end as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::Header(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Model::from_tensors(header.config, tensors)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
