// SPDX-License-Identifier: MIT OR Apache-2.0

//! Code sources: turn hook-site activations into per-position codes, pool
//! them into one vector per example, and map code-space shifts back to
//! hook-site rows.

use crate::acts::{capture_sequence, Positions};
use crate::error::{Error, Result};
use crate::microlm::{HookSite, LmWeights, QueryCapture};
use crate::proto::{SourceDescriptor, SourceKind};
use crate::sae::{HeadBank, PreparedSae};
use crate::stylegen::{StyledExample, Token, Vocab};

pub struct CodeSource<'a> {
    pub kind: SourceKind,
    pub lm: &'a LmWeights,
    pub positions: Positions,
    pub vocab: Vocab,
    saes: Vec<PreparedSae>,
}

impl<'a> CodeSource<'a> {
    pub fn new(kind: SourceKind, lm: &'a LmWeights, bank: Option<&HeadBank>, positions: Positions, vocab: Vocab) -> Result<Self> {
        let c = &lm.config;
        let want_site = match kind {
            SourceKind::SaeResidual => HookSite::Residual,
            SourceKind::SaeQuery | SourceKind::RawQuery => HookSite::Query,
        };
        if c.hook_site != want_site {
            return Err(Error::Config(format!("{kind} codes need a model hooked at the {want_site} site")));
        }
        let saes = match (kind.uses_sae(), bank) {
            (false, _) => Vec::new(),
            (true, None) => return Err(Error::Config(format!("{kind} codes need an SAE bank"))),
            (true, Some(b)) => {
                if b.site != c.hook_site || b.layer != c.hook_layer {
                    return Err(Error::Config(format!(
                        "SAE bank was trained at layer {} ({}) but the model hooks layer {} ({})",
                        b.layer, b.site, c.hook_layer, c.hook_site
                    )));
                }
                let per_head = c.site_width() / c.site_heads();
                if b.heads.len() != c.site_heads() || b.d_in() != per_head {
                    return Err(Error::Width {
                        what: "SAE bank heads",
                        expected: c.site_heads() * per_head,
                        actual: b.heads.len() * b.d_in(),
                    });
                }
                b.prepared()?
            }
        };
        Ok(Self {
            kind,
            lm,
            positions,
            vocab,
            saes,
        })
    }

    pub fn slices(&self) -> usize {
        self.lm.config.site_heads()
    }

    /// Input width of one slice at the hook site.
    pub fn head_width(&self) -> usize {
        self.lm.config.site_width() / self.slices()
    }

    pub fn slice_width(&self) -> usize {
        match self.saes.first() {
            Some(s) => s.params.latent(),
            None => self.head_width(),
        }
    }

    pub fn width(&self) -> usize {
        self.slices() * self.slice_width()
    }

    pub fn descriptor(&self) -> SourceDescriptor {
        SourceDescriptor {
            kind: self.kind,
            layer: self.lm.config.hook_layer,
            positions: self.positions,
            slices: self.slices(),
            slice_width: self.slice_width(),
        }
    }

    /// Code of one hook-site row: per-head SAE codes, or the row itself.
    pub fn row_code(&self, row: &[f32]) -> Result<Vec<f32>> {
        if self.saes.is_empty() {
            return Ok(row.to_vec());
        }
        let w = self.head_width();
        let mut out = Vec::with_capacity(self.width());
        for (h, sae) in self.saes.iter().enumerate() {
            out.extend(sae.encode(&row[h * w..(h + 1) * w])?);
        }
        Ok(out)
    }

    /// Hook-site row whose code is `code + delta`, clamped at zero when
    /// `project` is set. For SAE sources the change is decoded and added to
    /// the original row, so reconstruction error is kept and a zero shift
    /// returns the row unchanged.
    pub fn shifted_row(&self, row: &[f32], code: &[f32], delta: &[f64], project: bool) -> Result<Vec<f32>> {
        if delta.len() != self.width() || code.len() != self.width() {
            return Err(Error::Width {
                what: "code shift",
                expected: self.width(),
                actual: delta.len(),
            });
        }
        let shift = |c: f32, d: f64| {
            let v = (c as f64 + d) as f32;
            if project {
                v.max(0.0)
            } else {
                v
            }
        };
        if self.saes.is_empty() {
            return Ok(row.iter().zip(delta).map(|(&q, &d)| shift(q, d)).collect());
        }
        let (w, hw) = (self.head_width(), self.slice_width());
        let mut out = row.to_vec();
        for (h, sae) in self.saes.iter().enumerate() {
            let c = &code[h * hw..(h + 1) * hw];
            let dh = &delta[h * hw..(h + 1) * hw];
            if dh.iter().all(|&d| d == 0.0) {
                continue;
            }
            let moved: Vec<f32> = c.iter().zip(dh).map(|(&ci, &di)| shift(ci, di)).collect();
            let before = sae.decode(c)?;
            let after = sae.decode(&moved)?;
            for ((o, a), b) in out[h * w..(h + 1) * w].iter_mut().zip(&after).zip(&before) {
                *o += a - b;
            }
        }
        Ok(out)
    }

    /// Codes of the selected positions of a capture whose SEP sits at
    /// `response_start`.
    pub fn position_codes(&self, cap: &QueryCapture, response_start: usize) -> Result<Vec<Vec<f32>>> {
        self.positions
            .range(cap.len(), response_start)
            .map(|p| self.row_code(cap.row(p)))
            .collect()
    }

    pub fn embed_capture(&self, cap: &QueryCapture, response_start: usize) -> Result<Vec<f32>> {
        pool(&self.position_codes(cap, response_start)?)
    }

    /// Pooled code of `BOS prompt SEP response`.
    pub fn embed_example(&self, ex: &StyledExample) -> Result<Vec<f32>> {
        let (seq, sep) = capture_sequence(ex, self.vocab);
        self.embed_sequence(&seq, sep)
    }

    pub fn embed_sequence(&self, seq: &[Token], response_start: usize) -> Result<Vec<f32>> {
        let cap = self.lm.capture(seq)?;
        self.embed_capture(&cap, response_start)
    }
}

/// Mean of the codes, accumulated in f64.
pub fn pool(codes: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = codes.first().ok_or(Error::Empty("selected positions"))?;
    let mut acc = vec![0.0f64; first.len()];
    for c in codes {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v as f64;
        }
    }
    let n = codes.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}
