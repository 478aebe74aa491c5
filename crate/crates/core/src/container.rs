//! Portable weight container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset        size  field
//! 0             8     magic  b"DSEGWT01"
//! 8             8     header_len: u64
//! 16            H     header: UTF-8 JSON, H = header_len
//! 16+H          B     blob: concatenated tensor values
//! 16+H+B        8     checksum: u64 = first 8 bytes of SHA-256(blob), read LE
//! ```
//!
//! The header is
//! `{"metadata": {str: str}, "tensors": {name: {"dtype": "f64"|"f32",
//! "shape": [..], "offset": u64, "length": u64}}}` with `offset`/`length`
//! in bytes relative to the blob start. Tensors are written in name order.
//! See `docs/weight-container.md` for a worked example.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSEGWT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Entry>,
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

/// 64-bit checksum of a byte region.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.detached());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Looks up a tensor and checks its shape against a schema.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for &v in t.data() {
                match dtype {
                    DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            entries.insert(
                name.clone(),
                Entry {
                    dtype,
                    shape: t.shape().to_vec(),
                    offset,
                    length: blob.len() as u64 - offset,
                },
            );
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(24 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out.extend_from_slice(&checksum64(&blob).to_le_bytes());
        Ok(out)
    }

    /// Parses and verifies a container; nothing is returned unless every
    /// check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: String| Error::Integrity(m);
        if bytes.len() < 24 {
            return Err(integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(integrity("bad magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&s| s <= bytes.len() - 8)
            .ok_or_else(|| integrity(format!("header length {header_len} overruns file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| integrity(format!("unreadable header: {e}")))?;
        let blob = &bytes[blob_start..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let actual = checksum64(blob);
        if stored != actual {
            return Err(integrity(format!(
                "checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
            )));
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let numel: usize = e.shape.iter().product();
            let (off, len) = (e.offset as usize, e.length as usize);
            if len != numel * e.dtype.size() || off.checked_add(len).is_none_or(|end| end > blob.len()) {
                return Err(integrity(format!("tensor `{name}` has an invalid byte range")));
            }
            let raw = &blob[off..off + len];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(dtype)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightContainer {
        let mut c = WeightContainer::new();
        c.insert("a", &Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        c.insert("b.bias", &Tensor::from_fn(&[4], |i| (i as f64).exp()));
        c.metadata.insert("kind".into(), "test".into());
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = WeightContainer::from_bytes(&c.to_bytes(DType::F64).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_storage_rounds_values() {
        let c = sample();
        let back = WeightContainer::from_bytes(&c.to_bytes(DType::F32).unwrap()).unwrap();
        let a = back.get("a").unwrap();
        assert_eq!(a.data()[1], (1.0f64 * 0.1 - 0.2) as f32 as f64);
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let bytes = sample().to_bytes(DType::F64).unwrap();
        for cut in [0, 10, 30, bytes.len() - 1] {
            let err = WeightContainer::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_byte_is_integrity_error() {
        let mut bytes = sample().to_bytes(DType::F64).unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 0x40;
        assert!(matches!(
            WeightContainer::from_bytes(&bytes),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn schema_errors_name_the_tensor() {
        let c = sample();
        let e = c.expect("missing.weight", &[1]).unwrap_err();
        assert!(e.to_string().contains("missing.weight"));
        let e = c.expect("a", &[3, 2]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("`a`") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
