//! Parameter snapshots: a JSON manifest followed by a little-endian `f64` payload.
//!
//! Layout:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | `0..8`           | magic `GSNAPv01`                          |
//! | `8..16`          | manifest length `L` as `u64` little-endian |
//! | `16..16+L`       | UTF-8 JSON manifest                       |
//! | `16+L..`         | tensor payload, `f64` little-endian       |
//!
//! The manifest is `{"tensors": [{"name", "rows", "cols", "offset"}], "meta": ...}`
//! where `offset` counts `f64` elements from the start of the payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GSNAPv01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    payload: Vec<f64>,
}

impl Snapshot {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(TensorEntry {
            name: name.into(),
            rows: t.rows(),
            cols: t.cols(),
            offset: self.payload.len(),
        });
        self.payload.extend(t.data().iter().map(|x| x.to_f64_lossy()));
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Snapshot(format!("missing tensor `{name}`")))?;
        let data = self.payload[e.offset..e.offset + e.rows * e.cols]
            .iter()
            .map(|&x| T::lit(x))
            .collect();
        Tensor::new(e.rows, e.cols, data)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let manifest = serde_json::to_vec(&Manifest {
            tensors: self.entries.clone(),
            meta: self.meta.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let mut buf = Vec::with_capacity(self.payload.len() * 8);
        for x in &self.payload {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Snapshot("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
        let body = &bytes[end..];
        if !body.len().is_multiple_of(8) {
            return Err(Error::Snapshot("payload is not a whole number of f64".into()));
        }
        let payload: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for e in &manifest.tensors {
            if e.offset + e.rows * e.cols > payload.len() {
                return Err(Error::Snapshot(format!("tensor `{}` exceeds payload", e.name)));
            }
        }
        Ok(Self {
            meta: manifest.meta,
            entries: manifest.tensors,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::<f64>::from_fn(3, 2, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0));
        let b = Tensor::<f64>::row(vec![f64::MIN_POSITIVE, -0.0, 1e300]);
        let mut s = Snapshot::new(serde_json::json!({"step": 7}));
        s.push("a", &a);
        s.push("b", &b);
        let back = Snapshot::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.tensor::<f64>("a").unwrap(), a);
        let bb = back.tensor::<f64>("b").unwrap();
        assert!(bb.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.meta["step"], 7);
    }

    #[test]
    fn rejects_truncated_input() {
        let mut s = Snapshot::new(serde_json::Value::Null);
        s.push("a", &Tensor::<f64>::row(vec![1.0, 2.0]));
        let bytes = s.to_bytes();
        assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Snapshot::from_bytes(b"nope").is_err());
    }
}
