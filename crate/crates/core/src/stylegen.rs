// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic styled corpus with known class-conditional token distributions
//! and an exact-likelihood judge.
//!
//! Every class owns a disjoint block of "marker" tokens that carries most of
//! its probability mass; the rest is a smoothing floor spread over the whole
//! content vocabulary. Responses mix the class distribution with a shared,
//! class-independent distribution in proportion `style_mix`, so the mix ratio
//! sets how hard the classes are to tell apart.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub type Token = u32;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = ["remember", "understand", "apply", "analyze", "evaluate", "create"];

/// Token id layout: content tokens first, then the three specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub content: usize,
}

impl Vocab {
    pub fn bos(self) -> Token {
        self.content as Token
    }
    pub fn eos(self) -> Token {
        self.content as Token + 1
    }
    pub fn sep(self) -> Token {
        self.content as Token + 2
    }
    pub fn size(self) -> usize {
        self.content + 3
    }
    pub fn is_content(self, t: Token) -> bool {
        (t as usize) < self.content
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub classes: usize,
    pub content_vocab: usize,
    pub prompt_len: [usize; 2],
    pub response_len: [usize; 2],
    pub style_mix: f64,
    pub smoothing: f64,
    /// train / valid / test fractions.
    pub splits: [f64; 3],
    pub examples: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            content_vocab: 64,
            prompt_len: [6, 10],
            response_len: [20, 28],
            style_mix: 0.7,
            smoothing: 1e-4,
            splits: [0.5, 0.2, 0.3],
            examples: 3000,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            content: self.content_vocab,
        }
    }

    /// Longest sequence `BOS prompt SEP response EOS` this config can emit.
    pub fn max_sequence_len(&self) -> usize {
        self.prompt_len[1] + self.response_len[1] + 3
    }

    pub fn marker_block(&self) -> usize {
        self.content_vocab / self.classes.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.marker_block() == 0 {
            return bad(format!(
                "vocabulary of {} content tokens is too small for {} marker blocks",
                self.content_vocab, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.style_mix) {
            return bad(format!("style_mix {} outside [0, 1]", self.style_mix));
        }
        if !(0.0..1.0).contains(&self.smoothing) || self.smoothing * self.content_vocab as f64 >= 1.0 {
            return bad(format!("smoothing floor {} leaves no mass for markers", self.smoothing));
        }
        let total: f64 = self.splits.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.splits.iter().any(|&f| f < 0.0) {
            return bad(format!("split fractions {:?} must be nonnegative and sum to 1", self.splits));
        }
        for (name, [lo, hi]) in [("prompt_len", self.prompt_len), ("response_len", self.response_len)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.response_len[0] == 0 {
            return bad("responses must be non-empty".into());
        }
        if self.examples == 0 {
            return bad("corpus needs at least one example".into());
        }
        Ok(())
    }

    /// Split sizes, rounding the first two and giving the remainder to test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.examples as f64 * self.splits[0]).round() as usize;
        let valid = ((self.examples as f64 * self.splits[1]).round() as usize).min(self.examples - train);
        [train, valid, self.examples - train - valid]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub class: usize,
    pub name: String,
    /// Probability of each content token.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyledExample {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub label: usize,
}

impl StyledExample {
    /// `BOS prompt SEP response EOS`, plus the index of SEP.
    pub fn sequence(&self, vocab: Vocab) -> (Vec<Token>, usize) {
        let mut seq = Vec::with_capacity(self.prompt.len() + self.response.len() + 3);
        seq.push(vocab.bos());
        seq.extend_from_slice(&self.prompt);
        let sep = seq.len();
        seq.push(vocab.sep());
        seq.extend_from_slice(&self.response);
        seq.push(vocab.eos());
        (seq, sep)
    }

    /// `BOS prompt SEP`, the generation prompt.
    pub fn generation_prompt(&self, vocab: Vocab) -> Vec<Token> {
        let mut seq = Vec::with_capacity(self.prompt.len() + 2);
        seq.push(vocab.bos());
        seq.extend_from_slice(&self.prompt);
        seq.push(vocab.sep());
        seq
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<StyledExample>,
    pub valid: Vec<StyledExample>,
    pub test: Vec<StyledExample>,
}

fn class_name(k: usize, classes: usize) -> String {
    if classes <= DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES[k].to_string()
    } else {
        format!("class{k}")
    }
}

/// Resolves a class given by name or index.
pub fn class_index(specs: &[StyleSpec], key: &str) -> Option<usize> {
    specs
        .iter()
        .position(|s| s.name == key)
        .or_else(|| key.parse::<usize>().ok().filter(|&k| k < specs.len()))
}

pub fn build_specs(config: &CorpusConfig, seed: u64) -> Result<Vec<StyleSpec>> {
    config.validate()?;
    let v = config.content_vocab;
    let block = config.marker_block();
    let mut rng = seeds::rng(seed, "style-specs");
    let marker_mass = 1.0 - v as f64 * config.smoothing;
    (0..config.classes)
        .map(|k| {
            let weights: Vec<f64> = (0..block).map(|_| rng.gen_range(0.5..1.5)).collect();
            let wsum: f64 = weights.iter().sum();
            let mut probs = vec![config.smoothing; v];
            for (i, w) in weights.iter().enumerate() {
                probs[k * block + i] += marker_mass * w / wsum;
            }
            Ok(StyleSpec {
                class: k,
                name: class_name(k, config.classes),
                probs,
            })
        })
        .collect()
}

/// Class-independent content distribution shared by prompts and responses.
pub fn shared_distribution(config: &CorpusConfig) -> Vec<f64> {
    vec![1.0 / config.content_vocab as f64; config.content_vocab]
}

fn sample_index(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.gen::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Token sampler for one class's responses: `mix·class + (1 − mix)·shared`.
pub(crate) struct ResponseSampler {
    class_cdfs: Vec<Vec<f64>>,
    shared_cdf: Vec<f64>,
    mix: f64,
}

impl ResponseSampler {
    pub(crate) fn new(specs: &[StyleSpec], config: &CorpusConfig) -> Self {
        Self {
            class_cdfs: specs.iter().map(|s| cumulative(&s.probs)).collect(),
            shared_cdf: cumulative(&shared_distribution(config)),
            mix: config.style_mix,
        }
    }

    pub(crate) fn prompt(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<Token> {
        (0..len).map(|_| sample_index(rng, &self.shared_cdf) as Token).collect()
    }

    pub(crate) fn response(&self, rng: &mut ChaCha8Rng, class: usize, len: usize) -> Vec<Token> {
        (0..len)
            .map(|_| {
                let cdf = if rng.gen::<f64>() < self.mix {
                    &self.class_cdfs[class]
                } else {
                    &self.shared_cdf
                };
                sample_index(rng, cdf) as Token
            })
            .collect()
    }
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let specs = build_specs(config, config.seed)?;
    let sampler = ResponseSampler::new(&specs, config);
    let sizes = config.split_sizes();
    let mut splits = ["train", "valid", "test"].iter().zip(sizes).map(|(name, n)| {
        let mut rng = seeds::rng(config.seed, &format!("corpus-{name}"));
        // Round-robin labels keep every split balanced to within one example.
        let mut labels: Vec<usize> = (0..n).map(|i| i % config.classes).collect();
        for i in (1..labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        labels
            .into_iter()
            .map(|label| {
                let plen = rng.gen_range(config.prompt_len[0]..=config.prompt_len[1]);
                let rlen = rng.gen_range(config.response_len[0]..=config.response_len[1]);
                StyledExample {
                    prompt: sampler.prompt(&mut rng, plen),
                    response: sampler.response(&mut rng, label, rlen),
                    label,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(Corpus {
        train: splits.next().unwrap_or_default(),
        valid: splits.next().unwrap_or_default(),
        test: splits.next().unwrap_or_default(),
    })
}

/// Judge verdict: most likely class and the per-class log-likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub class: usize,
    pub log_likelihoods: Vec<f64>,
}

impl Verdict {
    /// Log-likelihood of `class` minus the best competing class.
    pub fn margin(&self, class: usize) -> f64 {
        let best_other = self
            .log_likelihoods
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != class)
            .map(|(_, &ll)| ll)
            .fold(f64::NEG_INFINITY, f64::max);
        self.log_likelihoods[class] - best_other
    }
}

/// Scores a response under each class distribution. Ties go to the lowest
/// class id.
pub fn judge(response: &[Token], specs: &[StyleSpec]) -> Result<Verdict> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    let first = specs.first().ok_or(Error::Empty("style specs"))?;
    let vocab = first.probs.len();
    if let Some(&t) = response.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::OutOfVocab {
            token: t as usize,
            vocab,
        });
    }
    let log_likelihoods: Vec<f64> = specs
        .iter()
        .map(|s| response.iter().map(|&t| s.probs[t as usize].ln()).sum())
        .collect();
    let mut class = 0;
    for (k, &ll) in log_likelihoods.iter().enumerate() {
        if ll > log_likelihoods[class] {
            class = k;
        }
    }
    Ok(Verdict {
        class,
        log_likelihoods,
    })
}

/// Monte-Carlo judge accuracy with a Wilson 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesEstimate {
    pub accuracy: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
}

pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    (centre - half, centre + half)
}

pub fn bayes_reference(specs: &[StyleSpec], config: &CorpusConfig, n_samples: usize, seed: u64) -> Result<BayesEstimate> {
    if n_samples < 1000 {
        return Err(Error::Config(format!("bayes_reference needs at least 1000 samples, got {n_samples}")));
    }
    let sampler = ResponseSampler::new(specs, config);
    let mut rng = seeds::rng(seed, "bayes-reference");
    let mut hits = 0;
    for i in 0..n_samples {
        let label = i % specs.len();
        let len = rng.gen_range(config.response_len[0]..=config.response_len[1]);
        let response = sampler.response(&mut rng, label, len);
        if judge(&response, specs)?.class == label {
            hits += 1;
        }
    }
    let (lower, upper) = wilson_interval(hits, n_samples);
    Ok(BayesEstimate {
        accuracy: hits as f64 / n_samples as f64,
        lower,
        upper,
        samples: n_samples,
    })
}

/// Writes one JSON object per line: `{"prompt":[..],"response":[..],"label":k}`.
pub fn write_jsonl(path: &Path, examples: &[StyledExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| Error::format("corpus", e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses one corpus line, checking tokens against the vocabulary.
pub fn parse_example(line: &str, vocab: Vocab, classes: usize) -> Result<StyledExample> {
    let ex: StyledExample = serde_json::from_str(line).map_err(|e| Error::format("corpus", e.to_string()))?;
    if ex.label >= classes {
        return Err(Error::format("corpus", format!("label {} outside 0..{classes}", ex.label)));
    }
    if ex.response.is_empty() {
        return Err(Error::format("corpus", "empty response"));
    }
    if let Some(&t) = ex.prompt.iter().chain(&ex.response).find(|&&t| !vocab.is_content(t)) {
        return Err(Error::OutOfVocab {
            token: t as usize,
            vocab: vocab.content,
        });
    }
    Ok(ex)
}

pub fn read_jsonl(path: &Path, vocab: Vocab, classes: usize) -> Result<Vec<StyledExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_example(&line, vocab, classes).map_err(|e| match e {
            Error::Format { format, reason } => Error::format(format, format!("line {}: {reason}", i + 1)),
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write_specs(path: &Path, specs: &[StyleSpec]) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(specs).map_err(|e| Error::format("specs", e.to_string()))?;
    out.push(b'\n');
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parses a specs document and checks each class distribution.
pub fn parse_specs(bytes: &[u8]) -> Result<Vec<StyleSpec>> {
    let specs: Vec<StyleSpec> = serde_json::from_slice(bytes).map_err(|e| Error::format("specs", e.to_string()))?;
    if specs.len() < 2 {
        return Err(Error::format("specs", "need at least two classes"));
    }
    let v = specs[0].probs.len();
    for (k, s) in specs.iter().enumerate() {
        if s.class != k {
            return Err(Error::format("specs", format!("entry {k} has class id {}", s.class)));
        }
        if s.probs.len() != v || v == 0 {
            return Err(Error::format("specs", format!("class {k} has {} probabilities, expected {v}", s.probs.len())));
        }
        let total: f64 = s.probs.iter().sum();
        if s.probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::format("specs", format!("class {k} is not a smoothed distribution")));
        }
    }
    Ok(specs)
}

pub fn read_specs(path: &Path) -> Result<Vec<StyleSpec>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_specs(&bytes)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
