// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steered generation: move a code toward a target prototype, then decode
//! with the shifted hook-site rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlm::{GenerateOptions, Generation};
use crate::proto::{direct_assign, steer, PrototypeBank, SteerConfig, SteerTrace, Termination};
use crate::source::{pool, CodeSource};
use crate::stylegen::Token;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    /// Generate, embed the finished pair, steer the pooled code once, then
    /// re-decode with the code shift applied at every steered position.
    #[default]
    Recode,
    /// Steer each new position's own code while decoding.
    Online,
}

impl std::fmt::Display for SteerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SteerMode::Recode => "recode",
            SteerMode::Online => "online",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Gradient,
    DirectAssign,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gradient => "gradient",
            Method::DirectAssign => "direct-assign",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeredOutput {
    pub unsteered: Generation,
    pub steered: Generation,
    /// Pooled code of the unsteered pair and its steered counterpart
    /// (recode mode only).
    pub code: Option<(Vec<f64>, Vec<f64>)>,
    /// One trace per steering run: one in recode mode, one per decoded
    /// position in online mode. Empty for direct assignment.
    pub traces: Vec<SteerTrace>,
}

impl SteeredOutput {
    pub fn mean_iterations(&self) -> f64 {
        if self.traces.is_empty() {
            return 0.0;
        }
        self.traces.iter().map(|t| t.steps as f64).sum::<f64>() / self.traces.len() as f64
    }
}

/// Drops a trailing EOS.
pub fn response_tokens(g: &Generation) -> &[Token] {
    if g.hit_eos {
        &g.tokens[..g.tokens.len() - 1]
    } else {
        &g.tokens
    }
}

pub struct SteerRequest<'a> {
    pub source: &'a CodeSource<'a>,
    pub bank: &'a PrototypeBank,
    pub target: usize,
    pub mode: SteerMode,
    pub method: Method,
    pub config: &'a SteerConfig,
    pub generate: &'a GenerateOptions,
}

fn move_code(req: &SteerRequest<'_>, z: &[f64], project: bool) -> Result<(Vec<f64>, Option<SteerTrace>)> {
    match req.method {
        Method::Gradient => {
            let (z_star, trace) = steer(z, req.bank, req.target, req.config, project)?;
            Ok((z_star, Some(trace)))
        }
        Method::DirectAssign => Ok((direct_assign(z, req.bank, req.target)?, None)),
    }
}

/// Steered continuation of `prompt` (`BOS x SEP`).
pub fn generate_steered(req: &SteerRequest<'_>, prompt: &[Token]) -> Result<SteeredOutput> {
    let src = req.source;
    if req.bank.width() != src.width() || req.bank.source.kind != src.kind {
        return Err(Error::Config(format!(
            "prototype bank of {} width {} does not match {} source width {}",
            req.bank.source.kind,
            req.bank.width(),
            src.kind,
            src.width()
        )));
    }
    let project = req.config.projects(src.kind);
    let sep = prompt.len() - 1;
    let steer_from = src.positions.range(usize::MAX, sep).start.min(sep);
    let opts = GenerateOptions {
        steer_from: Some(steer_from),
        ..req.generate.clone()
    };
    let unsteered = src.lm.generate(prompt, &opts, None)?;
    match req.mode {
        SteerMode::Recode => {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(response_tokens(&unsteered));
            let cap = src.lm.capture(&seq)?;
            let z: Vec<f64> = pool(&src.position_codes(&cap, sep)?)?.iter().map(|&v| v as f64).collect();
            let (z_star, trace) = move_code(req, &z, project)?;
            let delta: Vec<f64> = z_star.iter().zip(&z).map(|(a, b)| a - b).collect();
            let mut cb = |_: usize, row: &[f32]| -> Result<Vec<f32>> {
                let code = src.row_code(row)?;
                src.shifted_row(row, &code, &delta, project)
            };
            let steered = src.lm.generate(prompt, &opts, Some(&mut cb))?;
            Ok(SteeredOutput {
                unsteered,
                steered,
                code: Some((z, z_star)),
                traces: trace.into_iter().collect(),
            })
        }
        SteerMode::Online => {
            let mut traces = Vec::new();
            let mut cb = |_: usize, row: &[f32]| -> Result<Vec<f32>> {
                let code = src.row_code(row)?;
                let z: Vec<f64> = code.iter().map(|&v| v as f64).collect();
                let (z_star, trace) = move_code(req, &z, project)?;
                traces.extend(trace);
                let delta: Vec<f64> = z_star.iter().zip(&z).map(|(a, b)| a - b).collect();
                src.shifted_row(row, &code, &delta, project)
            };
            let steered = src.lm.generate(prompt, &opts, Some(&mut cb))?;
            Ok(SteeredOutput {
                unsteered,
                steered,
                code: None,
                traces,
            })
        }
    }
}

/// Fraction of traces that ended on the loop guard.
pub fn converged_fraction(traces: &[SteerTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().filter(|t| t.termination == Termination::Converged).count() as f64 / traces.len() as f64
}
