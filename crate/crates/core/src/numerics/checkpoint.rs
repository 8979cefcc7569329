//! Parameter container: an 8-byte little-endian header length, a JSON
//! header, then raw little-endian values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default)]
    metadata: Map<String, Value>,
    tensors: Vec<Entry>,
}

pub fn to_bytes(params: &ParamSet, metadata: &Map<String, Value>, dtype: DType) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        let length = t.len() * dtype.width();
        entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), dtype, offset, length });
        offset += length;
    }
    let header = Header { format_version: FORMAT_VERSION, metadata: metadata.clone(), tensors: entries };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, Map<String, Value>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("truncated header length".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[8 + hlen..];
    let mut params = ParamSet::new();
    for e in header.tensors {
        let raw = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past end of file", e.name)))?;
        if raw.len() % e.dtype.width() != 0 {
            return Err(Error::Format(format!("tensor {} has a ragged payload", e.name)));
        }
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((params, header.metadata))
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet, metadata: &Map<String, Value>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params, metadata, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamSet, Map<String, Value>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
