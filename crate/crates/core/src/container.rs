//! On-disk tensor container used by every pipeline stage.
//!
//! Layout: 4-byte magic `UNDS`, format version (u32 LE), header length
//! (u64 LE), a UTF-8 JSON header, then the raw little-endian payload.
//! The header names each tensor with its dtype, shape, byte offset, and
//! byte length, plus a free-form metadata object. Writers emit canonical
//! sorted-key headers and pack tensors in name order, so equal content
//! produces byte-identical files.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"UNDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor '{0}' declares bytes outside the payload")]
    OutOfBounds(String),
    #[error("tensor '{0}' overlaps another tensor")]
    Overlap(String),
    #[error("tensor '{name}' length {len} != dtype size x shape product {expect}")]
    LengthMismatch { name: String, len: u64, expect: u64 },
    #[error("container has no tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has dtype {found}, expected {expect}")]
    DtypeMismatch { name: String, found: &'static str, expect: &'static str },
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Tensor values held in memory with their declared element type.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A named array: shape plus typed storage, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: TensorData::F64(data) }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: TensorData::F32(data) }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn n_elems(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.n_elems() as u64 * self.dtype().size()
    }

    /// Values widened to f64 regardless of storage type.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Borrow as f64 without conversion; errors if stored as f32.
    pub fn as_f64(&self) -> Result<&[f64], ContainerError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::F32(_) => Err(ContainerError::DtypeMismatch {
                name: String::new(),
                found: "f32",
                expect: "f64",
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<u64>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: BTreeMap<String, HeaderEntry>,
    meta: BTreeMap<String, serde_json::Value>,
}

/// In-memory view of a container file: named tensors plus metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = t.byte_len();
            entries.insert(
                name.clone(),
                HeaderEntry {
                    dtype: t.dtype(),
                    shape: t.shape.iter().map(|&d| d as u64).collect(),
                    offset,
                    len,
                },
            );
            offset += len;
        }
        let header = Header { tensors: entries, meta: self.meta.clone() };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for t in self.tensors.values() {
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Container, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long)?;
        let header_len = u64::from_le_bytes(long) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        // validate declared extents before touching the payload
        let mut spans: Vec<(u64, u64, &String)> = Vec::new();
        for (name, e) in &header.tensors {
            let expect = e.dtype.size() * e.shape.iter().product::<u64>();
            if e.len != expect {
                return Err(ContainerError::LengthMismatch {
                    name: name.clone(),
                    len: e.len,
                    expect,
                });
            }
            let end = e
                .offset
                .checked_add(e.len)
                .ok_or_else(|| ContainerError::OutOfBounds(name.clone()))?;
            if end > payload.len() as u64 {
                return Err(ContainerError::OutOfBounds(name.clone()));
            }
            spans.push((e.offset, end, name));
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(ContainerError::Overlap(pair[1].2.clone()));
            }
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            let bytes = &payload[e.offset as usize..(e.offset + e.len) as usize];
            let shape: Vec<usize> = e.shape.iter().map(|&d| d as usize).collect();
            let data = match e.dtype {
                Dtype::F32 => TensorData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.insert(name.clone(), Tensor { shape, data });
        }
        Ok(Container { tensors, meta: header.meta })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Container::read_from(&mut r)
    }

    /// Serialized bytes of the whole file; used for hashing and determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write cannot fail");
        buf
    }
}
