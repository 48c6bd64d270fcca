//! `IQAW1` named-tensor container shared by the feature extractor and the quality models.
//!
//! Layout: the five magic bytes `IQAW1`, then records until end of input. Each
//! record is a little-endian `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` little-endian `u32` dimensions, and the row-major `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"IQAW1";

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("not an IQAW1 weight file (bad magic)")]
    BadMagic,
    #[error("weight file truncated while reading {0}")]
    Truncated(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name} has dims {found:?}, expected {expected:?}")]
    BadDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Ordered map of named tensors; serialization order is the lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    tensors: BTreeMap<String, NamedTensor>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Stores `values` (narrowed to `f32`) under `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, dims: &[usize], values: &[f64]) {
        assert_eq!(
            dims.iter().product::<usize>(),
            values.len(),
            "dims do not match payload"
        );
        self.tensors.insert(
            name.into(),
            NamedTensor {
                dims: dims.to_vec(),
                data: values.iter().map(|&v| v as f32).collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor, WeightError> {
        self.tensors
            .get(name)
            .ok_or_else(|| WeightError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Values of `name` widened to `f64`, checking the expected dims.
    pub fn values(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>, WeightError> {
        let t = self.get(name)?;
        if t.dims != dims {
            return Err(WeightError::BadDims {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t.to_f64())
    }

    pub fn scalar(&self, name: &str) -> Result<f64, WeightError> {
        Ok(self.values(name, &[1])?[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightError> {
        let rest = bytes.strip_prefix(MAGIC).ok_or(WeightError::BadMagic)?;
        let mut reader = Reader { buf: rest, pos: 0 };
        let mut tensors = BTreeMap::new();
        while !reader.done() {
            let name_len = reader.u32("record header")? as usize;
            let name = std::str::from_utf8(reader.take(name_len, "tensor name")?)
                .map_err(|_| WeightError::BadName)?
                .to_string();
            let rank = reader.u32(&name)? as usize;
            let dims = (0..rank)
                .map(|_| reader.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            let payload = reader.take(count * 4, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.contains_key(&name) {
                return Err(WeightError::Duplicate(name));
            }
            tensors.insert(name, NamedTensor { dims, data });
        }
        Ok(Self { tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| WeightError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
