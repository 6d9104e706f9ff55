//! Binary weight-file convention shared by checkpoints, grids and generators.
//!
//! Layout: 8-byte magic, `u32` version, `u32` header length, a JSON header
//! (kind, free-form metadata, tensor table with names, shapes, dtypes and byte
//! offsets into the payload), then the little-endian row-major payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADGNWGT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TableEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let table = self
            .tensors
            .iter()
            .map(|t| {
                let e = TableEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: t.data.dtype().into(),
                    offset,
                };
                offset += t.data.byte_len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: table,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.into(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing weight-file magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body_start = 16 + hlen;
        if bytes.len() < body_start {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            let end = e.offset + n * width;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
            let data = if width == 4 {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            };
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the `kind` field.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let f = Self::load(path)?;
        if f.kind != kind {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("expected a '{kind}' file, found '{}'", f.kind),
            });
        }
        Ok(f)
    }
}
