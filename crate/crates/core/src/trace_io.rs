//! `.cmgt` trace container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CMGT"
//! 4       4     format version (u32) = 1
//! 8       8     header length H (u64)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   tensor payload, f32 little-endian, row-major
//! ```
//!
//! The header is a JSON object:
//!
//! ```json
//! {
//!   "metadata": { "...": "free-form model metadata" },
//!   "layout": { "spans": [ {"role": "system", "start": 0, "len": 1}, ... ] },
//!   "tensors": [ {"name": "logits", "dtype": "f32", "shape": [21, 256], "byte_offset": 0} ]
//! }
//! ```
//!
//! `byte_offset` is relative to the start of the payload. Tensors appear in
//! directory order without overlap, each occupying `product(shape) * 4`
//! bytes, and the payload ends exactly where the last tensor ends.

use std::collections::HashSet;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::ModalityLayout;

pub const MAGIC: [u8; 4] = *b"CMGT";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "cmgt";

const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not a trace")]
    NotATrace,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt trace: {0}")]
    Corrupt(String),

    /// The in-memory container cannot be encoded.
    #[error("invalid container: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(msg: impl Into<String>) -> TraceError {
    TraceError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn element_count(&self) -> Option<usize> {
        element_count(&self.shape)
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceContainer {
    pub metadata: serde_json::Value,
    pub layout: Option<ModalityLayout>,
    pub tensors: Vec<Tensor>,
}

impl Default for TraceContainer {
    fn default() -> Self {
        Self {
            metadata: serde_json::Value::Object(Default::default()),
            layout: None,
            tensors: Vec::new(),
        }
    }
}

impl TraceContainer {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    layout: Option<ModalityLayout>,
    tensors: Vec<TensorEntry>,
}

/// Encodes a container. Identical containers give identical bytes.
pub fn write_trace(container: &TraceContainer) -> Result<Vec<u8>, TraceError> {
    let mut names = HashSet::new();
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut offset = 0u64;
    for t in &container.tensors {
        if !names.insert(t.name.as_str()) {
            return Err(TraceError::Invalid(format!("duplicate tensor name {:?}", t.name)));
        }
        let count = t
            .element_count()
            .ok_or_else(|| TraceError::Invalid(format!("shape of {:?} overflows", t.name)))?;
        if count != t.data.len() {
            return Err(TraceError::Invalid(format!(
                "tensor {:?} has shape {:?} ({} values) but {} values of payload",
                t.name,
                t.shape,
                count,
                t.data.len()
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            byte_offset: offset,
        });
        offset += count as u64 * 4;
    }
    let header = Header {
        metadata: container.metadata.clone(),
        layout: container.layout.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| TraceError::Invalid(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in &container.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_trace(bytes: &[u8]) -> Result<TraceContainer, TraceError> {
    TraceReader::new(bytes)?.to_container()
}

pub fn write_trace_file(path: impl AsRef<Path>, container: &TraceContainer) -> Result<(), TraceError> {
    std::fs::write(path, write_trace(container)?)?;
    Ok(())
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceContainer, TraceError> {
    read_trace(&std::fs::read(path)?)
}

/// Validated view over an encoded trace; tensors are decoded on request.
#[derive(Debug)]
pub struct TraceReader<'a> {
    metadata: serde_json::Value,
    layout: Option<ModalityLayout>,
    entries: Vec<TensorEntry>,
    ranges: Vec<(usize, usize)>,
    payload: &'a [u8],
}

impl<'a> TraceReader<'a> {
    /// Checks magic, version, header and the tensor directory before any
    /// payload is touched.
    pub fn new(bytes: &'a [u8]) -> Result<Self, TraceError> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() {
                corrupt("truncated magic")
            } else {
                TraceError::NotATrace
            });
        }
        if bytes[..4] != MAGIC {
            return Err(TraceError::NotATrace);
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(corrupt("truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[PREAMBLE_LEN..];
        if header_len > rest.len() as u64 {
            return Err(corrupt(format!(
                "header length {header_len} exceeds remaining {} bytes",
                rest.len()
            )));
        }
        let (header_bytes, payload) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;

        let mut names = HashSet::new();
        let mut ranges = Vec::with_capacity(header.tensors.len());
        let mut cursor = 0usize;
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(corrupt(format!("tensor {:?} has dtype {:?}", entry.name, entry.dtype)));
            }
            if !names.insert(entry.name.as_str()) {
                return Err(corrupt(format!("duplicate tensor {:?}", entry.name)));
            }
            let size = element_count(&entry.shape)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt(format!("tensor {:?} shape overflows", entry.name)))?;
            let start = usize::try_from(entry.byte_offset).map_err(|_| corrupt("offset out of range"))?;
            if start < cursor {
                return Err(corrupt(format!(
                    "tensor {:?} at offset {start} overlaps or is out of order",
                    entry.name
                )));
            }
            let end = start.checked_add(size).ok_or_else(|| corrupt("offset overflow"))?;
            if end > payload.len() {
                return Err(corrupt(format!(
                    "tensor {:?} needs bytes {start}..{end} but payload has {}",
                    entry.name,
                    payload.len()
                )));
            }
            ranges.push((start, end));
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(corrupt(format!(
                "payload has {} bytes, directory declares {cursor}",
                payload.len()
            )));
        }
        Ok(Self {
            metadata: header.metadata,
            layout: header.layout,
            entries: header.tensors,
            ranges,
            payload,
        })
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.metadata
    }

    pub fn layout(&self) -> Option<&ModalityLayout> {
        self.layout.as_ref()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    /// Decodes one tensor by name.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let idx = self.entries.iter().position(|e| e.name == name)?;
        Some(self.decode(idx))
    }

    fn decode(&self, idx: usize) -> Tensor {
        let (start, end) = self.ranges[idx];
        let data = self.payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let entry = &self.entries[idx];
        Tensor::new(entry.name.clone(), entry.shape.clone(), data)
    }

    pub fn to_container(&self) -> Result<TraceContainer, TraceError> {
        Ok(TraceContainer {
            metadata: self.metadata.clone(),
            layout: self.layout.clone(),
            tensors: (0..self.entries.len()).map(|i| self.decode(i)).collect(),
        })
    }
}
