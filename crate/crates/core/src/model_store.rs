//! Binary persistence for [`VaeModel`].
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                         |
//! |----------------|-------------------------------------------------|
//! | 4              | magic `VAEW`                                    |
//! | 4              | format version (`u32`)                          |
//! | 8              | header length in bytes (`u64`)                  |
//! | header length  | UTF-8 JSON header                               |
//! | rest           | payload: `f64` tensors, row-major, concatenated |
//!
//! The header lists `n_freqs`, `latent_dim`, `hidden_dim` and a tensor table
//! of `{name, shape, byte_offset}` where offsets are relative to the start of
//! the payload.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::vae::{Dense, VaeModel, TENSOR_NAMES};

pub const MAGIC: [u8; 4] = *b"VAEW";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic: expected \"VAEW\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: file has version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated file: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload length mismatch: header implies {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("shape inconsistency: {0}")]
    Shape(String),
    #[error("non-finite weights in tensor {0}")]
    NonFiniteWeights(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub n_freqs: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Serialises `m` to the byte layout described in the module docs.
pub fn to_bytes(m: &VaeModel) -> Vec<u8> {
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, shape, data) in m.tensors() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            byte_offset: offset,
        });
        offset += data.len() * 8;
    }
    let header = ModelHeader {
        n_freqs: m.n_freqs(),
        latent_dim: m.latent_dim(),
        hidden_dim: m.hidden_dim(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in m.tensors() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a file image into its parsed header and raw payload.
pub fn parse_header(bytes: &[u8]) -> Result<(ModelHeader, &[u8]), ModelFileError> {
    if bytes.len() < PREAMBLE {
        return Err(ModelFileError::Truncated {
            expected: PREAMBLE,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ModelFileError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelFileError::VersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .ok_or_else(|| ModelFileError::Header("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(ModelFileError::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| ModelFileError::Header(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

fn expected_shapes(h: &ModelHeader) -> [Vec<usize>; 10] {
    let (f, l, k) = (h.n_freqs, h.latent_dim, h.hidden_dim);
    [
        vec![k, f],
        vec![k],
        vec![l, k],
        vec![l],
        vec![l, k],
        vec![l],
        vec![k, l],
        vec![k],
        vec![f, k],
        vec![f],
    ]
}

/// Parses and validates a file image.
pub fn from_bytes(bytes: &[u8]) -> Result<VaeModel, ModelFileError> {
    let (header, payload) = parse_header(bytes)?;
    if header.tensors.len() != TENSOR_NAMES.len() {
        return Err(ModelFileError::Shape(format!(
            "expected {} tensors, header lists {}",
            TENSOR_NAMES.len(),
            header.tensors.len()
        )));
    }
    let shapes = expected_shapes(&header);
    let mut expected_len = 0;
    for ((entry, name), shape) in header.tensors.iter().zip(TENSOR_NAMES).zip(&shapes) {
        if entry.name != name {
            return Err(ModelFileError::Shape(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(ModelFileError::Shape(format!(
                "tensor {name} has shape {:?}, expected {shape:?} for F={} L={} hidden={}",
                entry.shape, header.n_freqs, header.latent_dim, header.hidden_dim
            )));
        }
        if entry.byte_offset != expected_len {
            return Err(ModelFileError::Shape(format!(
                "tensor {name} at byte offset {}, expected {expected_len}",
                entry.byte_offset
            )));
        }
        expected_len += shape.iter().product::<usize>() * 8;
    }
    if payload.len() != expected_len {
        return Err(ModelFileError::PayloadLength {
            expected: expected_len,
            actual: payload.len(),
        });
    }

    let mut tensors = Vec::with_capacity(10);
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let raw = &payload[entry.byte_offset..entry.byte_offset + count * 8];
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelFileError::NonFiniteWeights(entry.name.clone()));
        }
        tensors.push((entry.shape.clone(), values));
    }

    let mut it = tensors.into_iter();
    let mut dense = || {
        let (ws, w) = it.next().expect("weight");
        let (_, b) = it.next().expect("bias");
        Dense {
            weight: Array2::from_shape_vec((ws[0], ws[1]), w).expect("validated shape"),
            bias: Array1::from(b),
        }
    };
    Ok(VaeModel {
        enc_hidden: dense(),
        enc_mean: dense(),
        enc_logvar: dense(),
        dec_hidden: dense(),
        dec_out: dense(),
    })
}

pub fn save(m: &VaeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<VaeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}
