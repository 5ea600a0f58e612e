// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor container shared by the LM, SAE-bank and prototype files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PSTEERCK"
//! hlen       u32      byte length of the header
//! header     hlen     UTF-8 JSON object:
//!                     {"version":1,"kind":..,"meta":{..},
//!                      "tensors":[{"name":..,"shape":[..]},..]}
//! payload             for each tensor in header order, numel f32 values
//! ```
//!
//! Nothing may follow the last tensor.

use std::path::Path;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSTEERCK";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))
    }

    /// Tensor `name`, checked against an expected shape.
    pub fn take_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::format(
                "checkpoint",
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t.clone())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format("checkpoint", format!("expected a `{kind}` file, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(12 + hjson.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("checkpoint", r);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if hlen > MAX_HEADER || 12 + hlen > bytes.len() {
            return Err(bad(format!("header length {hlen} out of range")));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| bad(e.to_string()))?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut pos = 12 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| bad(format!("tensor `{}` has invalid shape {:?}", entry.name, entry.shape)))?;
            let end = numel
                .checked_mul(4)
                .and_then(|b| pos.checked_add(b))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("tensor `{}` is truncated", entry.name)))?;
            let data: Vec<f32> = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos = end;
            let t = Tensor::new(entry.shape, data).map_err(|e| bad(e.to_string()))?;
            if !t.is_finite() {
                return Err(bad(format!("tensor `{}` holds non-finite values", entry.name)));
            }
            tensors.push((entry.name, t));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
