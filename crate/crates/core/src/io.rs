//! Tensor container shared by checkpoints and generated datasets.
//!
//! Layout: 8-byte magic `S6TNSR01`, little-endian `u32` header length, a
//! JSON header, then a blob of little-endian `f32` values. The header lists
//! each tensor's name, shape and offset (in elements) and carries the CRC-32
//! of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"S6TNSR01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("container truncated: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("blob checksum mismatch: header says {expected:08x}, blob hashes to {found:08x}")]
    ChecksumMismatch { expected: u32, found: u32 },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has {found} elements, expected {expected}")]
    ShapeIncompatible {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("container kind is `{found}`, expected `{expected}`")]
    WrongKind { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    blob_len: usize,
    blob_crc32: u32,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data: Vec<f32>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a tensor, narrowing each value to `f32`.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/data mismatch");
        let offset = self.data.len();
        self.data.extend(values.iter().map(|v| *v as f32));
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            offset,
        });
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry, ContainerError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    /// Values of `name` widened to `f64`.
    pub fn get(&self, name: &str) -> Result<Vec<f64>, ContainerError> {
        let e = self.entry(name)?;
        Ok(self.data[e.offset..e.offset + e.numel()].iter().map(|v| f64::from(*v)).collect())
    }

    /// Like [`get`](Self::get) but checks the element count.
    pub fn get_len(&self, name: &str, expected: usize) -> Result<Vec<f64>, ContainerError> {
        let v = self.get(name)?;
        if v.len() != expected {
            return Err(ContainerError::ShapeIncompatible {
                name: name.to_string(),
                expected,
                found: v.len(),
            });
        }
        Ok(v)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::WrongKind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
            blob_len: self.data.len(),
            blob_crc32: crc32fast::hash(&blob),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated("magic"));
        }
        if &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let len_bytes: [u8; 4] = bytes
            .get(8..12)
            .ok_or(ContainerError::Truncated("header length"))?
            .try_into()
            .expect("4 bytes");
        let hlen = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(12..12 + hlen).ok_or(ContainerError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(ContainerError::BadHeader(format!("unsupported format version {}", header.format_version)));
        }
        let blob = &bytes[12 + hlen..];
        let need = header
            .blob_len
            .checked_mul(4)
            .ok_or_else(|| ContainerError::BadHeader("blob length overflows".into()))?;
        if blob.len() < need {
            return Err(ContainerError::Truncated("blob"));
        }
        if blob.len() > need {
            return Err(ContainerError::BadHeader("trailing bytes after blob".into()));
        }
        let found = crc32fast::hash(blob);
        if found != header.blob_crc32 {
            return Err(ContainerError::ChecksumMismatch {
                expected: header.blob_crc32,
                found,
            });
        }
        for t in &header.tensors {
            let numel = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| t.offset.checked_add(n)).map_or(true, |end| end > header.blob_len) {
                return Err(ContainerError::BadHeader(format!("tensor `{}` exceeds the blob", t.name)));
            }
        }
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors: header.tensors,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
