// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one TOML document covering every stage, with
//! `key.path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acts::Positions;
use crate::error::{Error, Result};
use crate::microlm::{HookSite, LmConfig, LmTrainConfig, Sampler};
use crate::proto::{SourceKind, SteerConfig};
use crate::sae::{Penalty, SaeConfig};
use crate::steering::SteerMode;
use crate::stylegen::CorpusConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    /// Support examples per class, taken in order from the training split.
    pub support: usize,
    pub positions: Positions,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            support: 30,
            positions: Positions::Response,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: SteerMode,
    pub prompts_per_cell: usize,
    /// Source classes whose test prompts are steered.
    pub sources: Vec<usize>,
    pub max_new: usize,
    /// EOS is suppressed until this many tokens; 0 uses the corpus minimum
    /// response length.
    pub min_new: usize,
    pub sampler: Sampler,
    pub bayes_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: SteerMode::Recode,
            prompts_per_cell: 50,
            sources: vec![0],
            max_new: 32,
            min_new: 0,
            sampler: Sampler::Greedy,
            bayes_samples: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub alphas: Vec<f32>,
    pub latents: Vec<usize>,
    pub penalties: Vec<Penalty>,
    pub sites: Vec<HookSite>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layers: vec![0, 1, 2, 3],
            alphas: vec![3e-4, 3e-3, 3e-2],
            latents: vec![256, 512, 1024, 2048],
            penalties: vec![Penalty::L1, Penalty::L2],
            sites: vec![HookSite::Query, HookSite::Residual],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub sae: SaeConfig,
    pub protos: ProtoConfig,
    pub steer: SteerConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            out_dir: PathBuf::from("runs/default"),
            jobs: 1,
            corpus: CorpusConfig::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig::default(),
            sae: SaeConfig::default(),
            protos: ProtoConfig::default(),
            steer: SteerConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Axes a sweep can run over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Layer,
    Alpha,
    Latent,
    Penalty,
    Site,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "layer" | "layers" => SweepAxis::Layer,
            "alpha" | "alphas" => SweepAxis::Alpha,
            "latent" | "latents" | "dim" => SweepAxis::Latent,
            "penalty" | "penalties" => SweepAxis::Penalty,
            "site" | "sites" => SweepAxis::Site,
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        })
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Layer => "layer",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Latent => "latent",
            SweepAxis::Penalty => "penalty",
            SweepAxis::Site => "site",
        })
    }
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `key.path=value` overrides, and
    /// validates the result. Unknown keys anywhere are errors.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.to_path_buf()));
                }
                std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?
            }
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.lm.validate()?;
        if self.lm.vocab != self.corpus.vocab().size() {
            return Err(Error::Config(format!(
                "lm.vocab {} must equal corpus content vocabulary plus 3 specials ({})",
                self.lm.vocab,
                self.corpus.vocab().size()
            )));
        }
        if self.corpus.max_sequence_len() > self.lm.context {
            return Err(Error::Config(format!(
                "corpus sequences of up to {} tokens exceed lm.context {}",
                self.corpus.max_sequence_len(),
                self.lm.context
            )));
        }
        let d_in = self.lm.site_width() / self.lm.site_heads();
        self.sae.validate(d_in)?;
        self.steer.validate()?;
        if self.protos.support == 0 {
            return Err(Error::Config("protos.support must be at least 1".into()));
        }
        if self.eval.prompts_per_cell == 0 || self.eval.sources.is_empty() {
            return Err(Error::Config("eval needs at least one source class and one prompt per cell".into()));
        }
        if let Some(&s) = self.eval.sources.iter().find(|&&s| s >= self.corpus.classes) {
            return Err(Error::Config(format!("eval source class {s} outside 0..{}", self.corpus.classes)));
        }
        if self.eval.bayes_samples < 1000 {
            return Err(Error::Config("eval.bayes_samples must be at least 1000".into()));
        }
        let s = &self.sweep;
        if s.layers.is_empty() || s.alphas.is_empty() || s.latents.is_empty() || s.penalties.is_empty() || s.sites.is_empty() {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        if let Some(&l) = s.layers.iter().find(|&&l| l >= self.lm.layers) {
            return Err(Error::Config(format!("sweep layer {l} outside 0..{}", self.lm.layers)));
        }
        Ok(())
    }

    /// Code source of the main run, given the hook site.
    pub fn sae_source(&self) -> SourceKind {
        match self.lm.hook_site {
            HookSite::Query => SourceKind::SaeQuery,
            HookSite::Residual => SourceKind::SaeResidual,
        }
    }

    pub fn min_new(&self) -> usize {
        if self.eval.min_new == 0 {
            self.corpus.response_len[0]
        } else {
            self.eval.min_new
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets `a.b.c = value` in `doc`. The value is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_with(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_with(
            "",
            &["sae.alpha=3e-2".into(), "eval.mode=online".into(), "out_dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.sae.alpha, 3e-2);
        assert_eq!(cfg.eval.mode, SteerMode::Online);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_with("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml_with("[sae]\nalpah = 1.0", &[]).is_err());
        assert!(ExperimentConfig::from_toml_with("", &["lm.widht=3".into()]).is_err());
    }

    #[test]
    fn invalid_layers_rejected() {
        assert!(ExperimentConfig::from_toml_with("", &["sweep.layers=[0,9]".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with("", &["sweep.alphas=[]".into()]).is_err());
    }
}
