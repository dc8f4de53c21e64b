//! Versioned binary container for oracle files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"MPQC"
//! 4       4     u32 format version (currently 1)
//! 8       4     u32 header length H in bytes
//! 12      H     UTF-8 JSON header
//! 12+H    ...   tensor payloads, concatenated in header order
//! ```
//!
//! The header is a JSON object:
//!
//! ```text
//! { "kind": "toy-classifier" | "quadratic",
//!   "meta": { ... kind-specific ... },
//!   "tensors": [ { "name": "...", "shape": [..], "dtype": "f32" | "f64" }, ... ] }
//! ```
//!
//! Each payload holds `prod(shape)` little-endian values of its dtype in
//! row-major order. Model weights are stored as `f32`; quadratic-oracle
//! matrices use `f64` so generated Hessians keep their exact values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MPQC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub info: TensorInfo,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Self {
        Self {
            info: TensorInfo {
                name: name.into(),
                shape,
                dtype,
            },
            data,
        }
    }
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.info.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|t| t.info.clone()).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            let expected: usize = t.info.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {:?} has shape {:?} but {} values",
                    t.info.name,
                    t.info.shape,
                    t.data.len()
                )));
            }
            match t.info.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut fixed = [0u8; 12];
        bytes
            .read_exact(&mut fixed)
            .map_err(|_| Error::Format("truncated container preamble".into()))?;
        if &fixed[..4] != MAGIC {
            return Err(Error::Format("bad magic, not an MPQC container".into()));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let header_len = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
        if bytes.len() < header_len {
            return Err(Error::Format("truncated container header".into()));
        }
        let (header, mut payload) = bytes.split_at(header_len);
        let header: Header =
            serde_json::from_slice(header).map_err(|e| Error::Format(format!("header: {e}")))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let count: usize = info.shape.iter().product();
            let width = info.dtype.width();
            if payload.len() < count * width {
                return Err(Error::Format(format!(
                    "truncated payload for {:?}",
                    info.name
                )));
            }
            let (chunk, rest) = payload.split_at(count * width);
            let data = match info.dtype {
                DType::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push(Tensor { info, data });
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
