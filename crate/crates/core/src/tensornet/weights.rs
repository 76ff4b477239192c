//! Weight files: `PMWT` magic, little-endian `u32` header length, a JSON
//! header, then a contiguous blob of little-endian `f32` values.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PMWT";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory form of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    /// Free-form metadata (model config, training step, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Number of f32 values.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {} shape/data mismatch", t.name)));
            }
            entries.push(Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += 4 * t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let hbytes = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::WeightFormat("truncated header".into()))?;
        let header: Header = serde_json::from_slice(hbytes)
            .map_err(|e| Error::WeightFormat(format!("corrupt header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::WeightFormat(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let blob = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::WeightFormat(format!("tensor {} shape/length mismatch", e.name)));
            }
            let raw = blob
                .get(e.offset..e.offset + 4 * e.len)
                .ok_or_else(|| Error::WeightFormat(format!("truncated blob at tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(WeightFile {
            meta: header.meta,
            tensors,
        })
    }
}

pub fn write_weight_file(path: &Path, file: &WeightFile) -> Result<()> {
    let bytes = file.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weight_file(path: &Path) -> Result<WeightFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightFile::from_bytes(&bytes)
}
