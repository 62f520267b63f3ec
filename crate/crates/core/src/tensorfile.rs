//! Container used by both weight files: a 5-byte magic, a little-endian `u32`
//! header length, a JSON header carrying metadata and the ordered array
//! manifest, then every array as raw `f32` little-endian values in manifest order.

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_TAG: &str = "f32le";
pub const MAX_HEADER_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header<M> {
    format: String,
    dtype: String,
    meta: M,
    arrays: Vec<ArrayEntry>,
}

/// A named array ready to be written.
pub struct NamedArray<'a> {
    pub name: &'a str,
    pub tensor: &'a Tensor,
}

pub fn encode<M: Serialize>(magic: &[u8; 5], meta: &M, arrays: &[NamedArray<'_>]) -> Result<Vec<u8>> {
    let format = String::from_utf8_lossy(magic).into_owned();
    let manifest = arrays
        .iter()
        .map(|a| ArrayEntry { name: a.name.to_string(), shape: a.tensor.dims().to_vec() })
        .collect();
    let header = Header { format, dtype: DTYPE_TAG.to_string(), meta, arrays: manifest };
    let header_bytes = serde_json::to_vec_pretty(&header)?;
    let payload_len: usize = arrays.iter().map(|a| a.tensor.elem_count() * 4).sum();

    let mut out = Vec::with_capacity(9 + header_bytes.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for a in arrays {
        let values = a.tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded file: metadata plus `(entry, values)` pairs in manifest order.
pub struct Decoded<M> {
    pub meta: M,
    pub arrays: Vec<(ArrayEntry, Vec<f32>)>,
}

impl<M> Decoded<M> {
    pub fn tensor(&self, index: usize, dtype: DType) -> Result<Tensor> {
        let (entry, values) = &self.arrays[index];
        Ok(Tensor::from_slice(values, entry.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub fn decode<M: DeserializeOwned>(magic: &[u8; 5], bytes: &[u8]) -> Result<Decoded<M>> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    if bytes.len() < 9 {
        return Err(corrupt(format!("{} bytes is shorter than the fixed preamble", bytes.len())));
    }
    if &bytes[..5] != magic {
        return Err(corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..5]),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    if header_len > MAX_HEADER_BYTES || 9 + header_len > bytes.len() {
        return Err(corrupt(format!("header length {header_len} exceeds payload")));
    }
    let header: Header<M> = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.dtype != DTYPE_TAG {
        return Err(corrupt(format!("unsupported dtype `{}`", header.dtype)));
    }

    let mut offset = 9 + header_len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let n = entry.len();
        let end = offset + n * 4;
        if end > bytes.len() {
            return Err(corrupt(format!("array `{}` truncated", entry.name)));
        }
        let values = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push((entry, values));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Decoded { meta: header.meta, arrays })
}
