//! `.tns` tensor files: 8-byte magic `TNSR0001`, little-endian `u32` header length,
//! a UTF-8 JSON header and a raw little-endian `f32` row-major payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TNSR0001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    order: String,
    shape: Vec<usize>,
}

pub fn encode(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::shape(format!(
            "shape {shape:?} needs {expected} elements, got {}",
            data.len()
        )));
    }
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        order: "row-major".into(),
        shape: shape.to_vec(),
    })
    .map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a `.tns` byte buffer. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |detail: String| Error::format(origin, detail);
    if bytes.len() < 12 {
        return Err(bad(format!("file is {} bytes, too short", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("magic mismatch, expected TNSR0001".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| bad(format!("bad header json: {e}")))?;
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows".into()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != count * 4 {
        return Err(bad(format!(
            "header shape {:?} needs {} payload bytes, found {}",
            header.shape,
            count * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header.shape, data))
}

pub fn write(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(shape, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
