// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook-site activation dumps.
//!
//! File layout, integers and floats little-endian:
//!
//! ```text
//! header   one line of UTF-8 JSON terminated by '\n':
//!          {"format":"protosteer-acts","version":1,"layer":L,"site":"query",
//!           "heads":A,"head_width":W,"examples":N}
//! record   repeated N times:
//!            u32 label
//!            u32 positions P
//!            u32 response_start   index of the SEP position, < P
//!            P·A·W f32            row-major [P×A×W]
//! ```

use std::path::Path;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::{HookSite, LmWeights};
use crate::stylegen::{StyledExample, Vocab};

pub const FORMAT: &str = "protosteer-acts";
pub const VERSION: u32 = 1;

/// Which token positions of `BOS prompt SEP response` feed a computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    #[default]
    All,
    /// SEP and every response position: the rows whose outputs predict the
    /// response.
    Response,
}

impl Positions {
    pub fn range(self, positions: usize, response_start: usize) -> std::ops::Range<usize> {
        match self {
            Positions::All => 0..positions,
            Positions::Response => response_start.min(positions)..positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub format: String,
    pub version: u32,
    pub layer: usize,
    pub site: HookSite,
    pub heads: usize,
    pub head_width: usize,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub label: usize,
    pub response_start: usize,
    /// `[P×(A·W)]`
    pub values: Tensor,
}

impl DumpRecord {
    pub fn positions(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer: usize,
    pub site: HookSite,
    pub heads: usize,
    pub head_width: usize,
    pub records: Vec<DumpRecord>,
}

/// Sequence fed to the model when embedding an example: the training
/// sequence without its final EOS.
pub fn capture_sequence(ex: &StyledExample, vocab: Vocab) -> (Vec<u32>, usize) {
    let (mut seq, sep) = ex.sequence(vocab);
    seq.pop();
    (seq, sep)
}

impl ActivationDump {
    pub fn capture(weights: &LmWeights, examples: &[StyledExample], vocab: Vocab) -> Result<Self> {
        let c = &weights.config;
        let heads = c.site_heads();
        let mut records = Vec::with_capacity(examples.len());
        for ex in examples {
            let (seq, sep) = capture_sequence(ex, vocab);
            let cap = weights.capture(&seq)?;
            records.push(DumpRecord {
                label: ex.label,
                response_start: sep,
                values: cap.values,
            });
        }
        Ok(Self {
            layer: c.hook_layer,
            site: c.hook_site,
            heads,
            head_width: c.site_width() / heads,
            records,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_width
    }

    /// All selected vectors of one head, stacked `[n×head_width]`.
    pub fn head_matrix(&self, head: usize, positions: Positions, records: impl Iterator<Item = usize>) -> Result<Tensor> {
        if head >= self.heads {
            return Err(Error::Width {
                what: "head index",
                expected: self.heads,
                actual: head,
            });
        }
        let w = self.head_width;
        let mut data = Vec::new();
        for i in records {
            let r = &self.records[i];
            for p in positions.range(r.positions(), r.response_start) {
                data.extend_from_slice(&r.values.row(p)[head * w..(head + 1) * w]);
            }
        }
        if data.is_empty() {
            return Err(Error::Empty("activation selection"));
        }
        let n = data.len() / w;
        Ok(Tensor::matrix(n, w, data)?)
    }

    pub fn header(&self) -> DumpHeader {
        DumpHeader {
            format: FORMAT.into(),
            version: VERSION,
            layer: self.layer,
            site: self.site,
            heads: self.heads,
            head_width: self.head_width,
            examples: self.records.len(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            out.extend_from_slice(&(r.label as u32).to_le_bytes());
            out.extend_from_slice(&(r.positions() as u32).to_le_bytes());
            out.extend_from_slice(&(r.response_start as u32).to_le_bytes());
            for v in r.values.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("activation dump", r);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let h: DumpHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        if h.format != FORMAT || h.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", h.format, h.version)));
        }
        if h.heads == 0 || h.head_width == 0 {
            return Err(bad("zero heads or head width".into()));
        }
        let width = h
            .heads
            .checked_mul(h.head_width)
            .ok_or_else(|| bad("width overflows".into()))?;
        let mut pos = nl + 1;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated record".into()))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let mut records = Vec::with_capacity(h.examples.min(bytes.len() / 12));
        for i in 0..h.examples {
            let label = u32_at(&mut pos)? as usize;
            let positions = u32_at(&mut pos)? as usize;
            let response_start = u32_at(&mut pos)? as usize;
            if positions == 0 || response_start >= positions {
                return Err(bad(format!("record {i}: response start {response_start} outside {positions} positions")));
            }
            let end = positions
                .checked_mul(width)
                .and_then(|n| n.checked_mul(4))
                .and_then(|n| pos.checked_add(n))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("record {i} is truncated")))?;
            let data: Vec<f32> = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos = end;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("record {i} holds non-finite values")));
            }
            records.push(DumpRecord {
                label,
                response_start,
                values: Tensor::matrix(positions, width, data)?,
            });
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            layer: h.layer,
            site: h.site,
            heads: h.heads,
            head_width: h.head_width,
            records,
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
