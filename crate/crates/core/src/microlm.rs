// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-norm decoder-only transformer with a capture/replace hook at
//! one layer.
//!
//! The hook sees either the query projection of a layer (before rotary
//! position encoding is applied) or the residual stream entering that layer.
//! Rows of the query tensor are laid out head-major, so a `[S×D]` capture is
//! also the `[S×A×d_head]` view.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numkit::{adam_step, AdamState, Graph, LrSchedule, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::seeds;
use crate::stylegen::{StyledExample, Token, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookSite {
    Query,
    Residual,
}

impl std::fmt::Display for HookSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HookSite::Query => "query",
            HookSite::Residual => "residual",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_mlp: usize,
    pub context: usize,
    pub hook_layer: usize,
    pub hook_site: HookSite,
    pub rope_base: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 67,
            d_model: 64,
            layers: 4,
            heads: 4,
            d_mlp: 256,
            context: 128,
            hook_layer: 2,
            hook_site: HookSite::Query,
            rope_base: 10_000.0,
        }
    }
}

impl LmConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_head() % 2 != 0 {
            return bad(format!("head width {} must be even for rotary encoding", self.d_head()));
        }
        if self.hook_layer >= self.layers {
            return bad(format!("hook layer {} outside 0..{}", self.hook_layer, self.layers));
        }
        if self.vocab == 0 || self.d_mlp == 0 || self.context < 2 {
            return bad("vocab, d_mlp and context must be positive".into());
        }
        Ok(())
    }

    /// Width of one hook-site row.
    pub fn site_width(&self) -> usize {
        self.d_model
    }

    /// Number of independent vectors per hook-site row: the heads for the
    /// query site, one for the residual stream.
    pub fn site_heads(&self) -> usize {
        match self.hook_site {
            HookSite::Query => self.heads,
            HookSite::Residual => 1,
        }
    }
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g, &self.ln2_b, &self.w1,
            &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    pub config: LmConfig,
    pub tok_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub unembed: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, || rng.gen_range(-bound..bound))
}

/// What a hook does with the activations it was shown.
#[derive(Clone, Debug, PartialEq)]
pub enum HookAction {
    Keep,
    Replace(Tensor),
}

/// Hook-site activations of one sequence at the hook layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryCapture {
    pub layer: usize,
    pub site: HookSite,
    pub heads: usize,
    /// `[S×width]`; for the query site each row is `A` head vectors of
    /// `d_head` values.
    pub values: Tensor,
}

impl QueryCapture {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        self.values.row(pos)
    }

    pub fn head(&self, pos: usize, head: usize) -> &[f32] {
        let w = self.head_width();
        &self.values.row(pos)[head * w..(head + 1) * w]
    }
}

/// Replacement rows for the hook site; rows with `mask[p] == false` keep
/// the model's own activations.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionPlan {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl InterventionPlan {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        let rows = values.dims2().map(|(r, _)| r).unwrap_or(0);
        if rows != mask.len() {
            return Err(Error::Width {
                what: "intervention mask",
                expected: rows,
                actual: mask.len(),
            });
        }
        Ok(Self { values, mask })
    }

    /// Replaces every position with the captured values.
    pub fn from_capture(capture: &QueryCapture) -> Self {
        Self {
            values: capture.values.clone(),
            mask: vec![true; capture.len()],
        }
    }

    /// Rows of `original`, with masked rows taken from the plan.
    fn merge(&self, original: &Tensor) -> Result<Tensor> {
        if original.shape() != self.values.shape() {
            return Err(Error::Width {
                what: "intervention plan",
                expected: original.numel(),
                actual: self.values.numel(),
            });
        }
        let w = original.shape()[1];
        let mut data = original.data().to_vec();
        for (p, &on) in self.mask.iter().enumerate() {
            if on {
                data[p * w..(p + 1) * w].copy_from_slice(self.values.row(p));
            }
        }
        Ok(Tensor::new(original.shape().to_vec(), data)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// EOS is not emitted before this many new tokens.
    pub min_new: usize,
    pub sampler: Sampler,
    pub eos: Option<Token>,
    /// Tokens never emitted.
    pub banned: Vec<Token>,
    /// First position whose hook-site row goes through the steer callback.
    /// `None` means the last prompt position, so only rows that produce new
    /// tokens are touched.
    pub steer_from: Option<usize>,
}

impl GenerateOptions {
    pub fn for_vocab(vocab: Vocab, max_new: usize) -> Self {
        Self {
            max_new,
            min_new: 1,
            sampler: Sampler::Greedy,
            eos: Some(vocab.eos()),
            banned: vec![vocab.bos(), vocab.sep()],
            steer_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// New tokens only, including a final EOS when one was produced.
    pub tokens: Vec<Token>,
    pub hit_eos: bool,
    /// Generation stopped because the context window was full.
    pub truncated: bool,
}

/// Per-position steering callback: position index and that position's
/// hook-site row in, replacement row out.
pub type SteerCallback<'a> = dyn FnMut(usize, &[f32]) -> Result<Vec<f32>> + 'a;

impl LmWeights {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seed, "lm-init");
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab);
        let proj = 1.0 / (d as f32).sqrt();
        let resid = proj / (2.0 * config.layers as f32).sqrt();
        let tok_emb = uniform(&mut rng, &[v, d], 1.0);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: uniform(&mut rng, &[d, d], proj),
                wk: uniform(&mut rng, &[d, d], proj),
                wv: uniform(&mut rng, &[d, d], proj),
                wo: uniform(&mut rng, &[d, d], resid),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: uniform(&mut rng, &[d, m], proj),
                b1: Tensor::zeros(&[m]),
                w2: uniform(&mut rng, &[m, d], resid * (d as f32 / m as f32).sqrt()),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            blocks,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            // Near-zero logits at initialization.
            unembed: uniform(&mut rng, &[d, v], 1e-3),
        })
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.unembed);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).expect("config serializes");
        let mut ck = Checkpoint::new("lm", meta);
        for (name, t) in self.named_tensors() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("lm")?;
        let config: LmConfig =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        // Shapes come from a fresh initialization of the same config.
        let mut w = Self::init(&config, 0).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let names: Vec<(String, Vec<usize>)> =
            w.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), slot) in names.iter().zip(w.tensors_mut()) {
            *slot = ck.take_shaped(name, shape)?;
        }
        if ck.tensors.len() != names.len() {
            return Err(Error::format("checkpoint", format!("expected {} tensors, found {}", names.len(), ck.tensors.len())));
        }
        Ok(w)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::OutOfVocab {
                token: t as usize,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn load(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| {
                let t = t.clone();
                Ok(if trainable { g.param(t)? } else { g.constant(t)? })
            })
            .collect()
    }

    /// Records the packed forward pass of `seqs` on `g` and returns logits
    /// `[ΣS×V]`. `hook` is called once per sequence at the hook site.
    fn record(
        &self,
        g: &mut Graph,
        vars: &[Var],
        seqs: &[&[Token]],
        hook: &mut dyn FnMut(usize, &Tensor) -> Result<HookAction>,
    ) -> Result<Var> {
        let c = &self.config;
        let (a, dh) = (c.heads, c.d_head());
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let scale = 1.0 / (dh as f32).sqrt();

        let mut x = g.gather_rows(vars[0], &ids)?;
        for l in 0..c.layers {
            let p = &vars[1 + l * BLOCK_FIELDS.len()..1 + (l + 1) * BLOCK_FIELDS.len()];
            let hooked = l == c.hook_layer;
            if hooked && c.hook_site == HookSite::Residual {
                x = apply_hook(g, x, &lens, hook)?;
            }
            let h = g.layer_norm(x, p[0], p[1])?;
            let mut q = g.matmul(h, p[2])?;
            let k = g.matmul(h, p[3])?;
            let v = g.matmul(h, p[4])?;
            if hooked && c.hook_site == HookSite::Query {
                q = apply_hook(g, q, &lens, hook)?;
            }
            let mut per_seq = Vec::with_capacity(seqs.len());
            let mut off = 0;
            for &n in &lens {
                let (qs, ks, vs) = if seqs.len() == 1 {
                    (q, k, v)
                } else {
                    (g.narrow(q, 0, off, n)?, g.narrow(k, 0, off, n)?, g.narrow(v, 0, off, n)?)
                };
                let mut heads = Vec::with_capacity(a);
                for head in 0..a {
                    let qh = g.narrow(qs, 1, head * dh, dh)?;
                    let kh = g.narrow(ks, 1, head * dh, dh)?;
                    let vh = g.narrow(vs, 1, head * dh, dh)?;
                    let qh = g.rope(qh, c.rope_base)?;
                    let kh = g.rope(kh, c.rope_base)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scores = g.scale(scores, scale)?;
                    let probs = g.causal_softmax(scores)?;
                    heads.push(g.matmul(probs, vh)?);
                }
                per_seq.push(g.concat(&heads, 1)?);
                off += n;
            }
            let attn = if per_seq.len() == 1 { per_seq[0] } else { g.concat(&per_seq, 0)? };
            let attn = g.matmul(attn, p[5])?;
            x = g.add(x, attn)?;
            let h = g.layer_norm(x, p[6], p[7])?;
            let m = g.matmul(h, p[8])?;
            let m = g.add_row(m, p[9])?;
            let m = g.relu(m)?;
            let m = g.matmul(m, p[10])?;
            let m = g.add_row(m, p[11])?;
            x = g.add(x, m)?;
        }
        let n = vars.len();
        let x = g.layer_norm(x, vars[n - 3], vars[n - 2])?;
        Ok(g.matmul(x, vars[n - 1])?)
    }

    /// Logits `[S×V]` for one sequence with an arbitrary hook.
    pub fn forward_hooked(
        &self,
        tokens: &[Token],
        hook: &mut dyn FnMut(&Tensor) -> Result<HookAction>,
    ) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let vars = self.load(&mut g, false)?;
        let logits = self.record(&mut g, &vars, &[tokens], &mut |_, t| hook(t))?;
        Ok(g.value(logits).clone())
    }

    pub fn forward(&self, tokens: &[Token]) -> Result<Tensor> {
        self.forward_hooked(tokens, &mut |_| Ok(HookAction::Keep))
    }

    pub fn forward_capture(&self, tokens: &[Token]) -> Result<(Tensor, QueryCapture)> {
        let mut captured = None;
        let logits = self.forward_hooked(tokens, &mut |t| {
            captured = Some(t.clone());
            Ok(HookAction::Keep)
        })?;
        let values = captured.expect("hook layer is always reached");
        Ok((
            logits,
            QueryCapture {
                layer: self.config.hook_layer,
                site: self.config.hook_site,
                heads: self.config.site_heads(),
                values,
            },
        ))
    }

    pub fn forward_intervene(&self, tokens: &[Token], plan: &InterventionPlan) -> Result<Tensor> {
        self.forward_hooked(tokens, &mut |t| Ok(HookAction::Replace(plan.merge(t)?)))
    }

    /// Hook-site activations only. Layers after the hook do not influence
    /// them, but the full pass is run so the values match `forward_capture`.
    pub fn capture(&self, tokens: &[Token]) -> Result<QueryCapture> {
        Ok(self.forward_capture(tokens)?.1)
    }

    /// Autoregressive decoding from `prompt`. With a callback, every hook-site
    /// row from `steer_from` onward is replaced by the callback's output; each
    /// row is computed once and reused on later steps.
    pub fn generate(
        &self,
        prompt: &[Token],
        opts: &GenerateOptions,
        mut callback: Option<&mut SteerCallback<'_>>,
    ) -> Result<Generation> {
        self.check_tokens(prompt)?;
        let mut rng = match opts.sampler {
            Sampler::Temperature { seed, .. } => Some(seeds::rng(seed, "sampler")),
            Sampler::Greedy => None,
        };
        let steer_from = opts.steer_from.unwrap_or(prompt.len() - 1);
        let width = self.config.site_width();
        let mut seq = prompt.to_vec();
        let mut rows: Vec<Vec<f32>> = Vec::new();
        let mut out = Generation {
            tokens: Vec::new(),
            hit_eos: false,
            truncated: false,
        };
        for _ in 0..opts.max_new {
            if seq.len() > self.config.context {
                out.truncated = true;
                break;
            }
            let logits = match callback.as_deref_mut() {
                None => self.forward(&seq)?,
                Some(cb) => self.forward_hooked(&seq, &mut |acts| {
                    let n = acts.shape()[0];
                    for p in steer_from + rows.len()..n {
                        let row = cb(p, acts.row(p))?;
                        if row.len() != width {
                            return Err(Error::Width {
                                what: "steer callback output",
                                expected: width,
                                actual: row.len(),
                            });
                        }
                        rows.push(row);
                    }
                    if rows.is_empty() {
                        return Ok(HookAction::Keep);
                    }
                    let mut data = acts.data().to_vec();
                    for (i, row) in rows.iter().enumerate() {
                        let p = steer_from + i;
                        data[p * width..(p + 1) * width].copy_from_slice(row);
                    }
                    Ok(HookAction::Replace(Tensor::new(acts.shape().to_vec(), data)?))
                })?,
            };
            let last = logits.row(logits.shape()[0] - 1);
            let next = if out.tokens.len() < opts.min_new {
                let mut banned = opts.banned.clone();
                banned.extend(opts.eos);
                pick(last, &banned, opts.sampler, rng.as_mut())
            } else {
                pick(last, &opts.banned, opts.sampler, rng.as_mut())
            };
            out.tokens.push(next);
            seq.push(next);
            if Some(next) == opts.eos {
                out.hit_eos = true;
                break;
            }
        }
        Ok(out)
    }

    /// Mean next-token cross-entropy over a packed batch, recorded on `g`.
    fn batch_loss(&self, g: &mut Graph, vars: &[Var], seqs: &[Vec<Token>]) -> Result<Var> {
        let inputs: Vec<&[Token]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
        let logits = self.record(g, vars, &inputs, &mut |_, _| Ok(HookAction::Keep))?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Mean next-token loss over `seqs` without recording gradients.
    pub fn mean_loss(&self, seqs: &[Vec<Token>]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in seqs.chunks(32) {
            let mut g = Graph::new();
            let vars = self.load(&mut g, false)?;
            let loss = self.batch_loss(&mut g, &vars, chunk)?;
            let n: usize = chunk.iter().map(|s| s.len() - 1).sum();
            total += g.value(loss).item().unwrap_or(f32::NAN) as f64 * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

fn apply_hook(
    g: &mut Graph,
    x: Var,
    lens: &[usize],
    hook: &mut dyn FnMut(usize, &Tensor) -> Result<HookAction>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(lens.len());
    let mut replaced = false;
    let mut off = 0;
    for (i, &n) in lens.iter().enumerate() {
        let part = if lens.len() == 1 { x } else { g.narrow(x, 0, off, n)? };
        match hook(i, g.value(part))? {
            HookAction::Keep => parts.push(part),
            HookAction::Replace(t) => {
                if t.shape() != g.value(part).shape() {
                    return Err(Error::Width {
                        what: "hook replacement",
                        expected: g.value(part).numel(),
                        actual: t.numel(),
                    });
                }
                replaced = true;
                parts.push(g.constant(t)?);
            }
        }
        off += n;
    }
    if !replaced {
        return Ok(x);
    }
    Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? })
}

fn pick(logits: &[f32], banned: &[Token], sampler: Sampler, rng: Option<&mut ChaCha8Rng>) -> Token {
    let allowed = |i: usize| !banned.contains(&(i as Token));
    match (sampler, rng) {
        (Sampler::Temperature { temperature, .. }, Some(rng)) if temperature > 0.0 => {
            let t = temperature as f64;
            let max = logits
                .iter()
                .enumerate()
                .filter(|&(i, _)| allowed(i))
                .map(|(_, &l)| l as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| if allowed(i) { ((l as f64 - max) / t).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    if u < *w {
                        return i as Token;
                    }
                    u -= w;
                }
            }
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as Token
        }
        _ => {
            // Greedy; ties go to the lowest token id.
            let mut best: Option<(usize, f32)> = None;
            for (i, &l) in logits.iter().enumerate() {
                if allowed(i) && best.map_or(true, |(_, b)| l > b) {
                    best = Some((i, l));
                }
            }
            best.map_or(0, |(i, _)| i) as Token
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    /// Number of validation sequences in the fixed loss batch.
    pub valid_batch: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            warmup_frac: 0.1,
            valid_batch: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub steps: usize,
    pub initial_valid_loss: f64,
    pub final_valid_loss: f64,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn training_sequences(examples: &[StyledExample], vocab: Vocab) -> Vec<Vec<Token>> {
    examples.iter().map(|e| e.sequence(vocab).0).collect()
}

/// Trains from a seeded initialization on `BOS prompt SEP response EOS`
/// sequences with Adam and a warmup/cosine schedule.
pub fn train_lm(
    config: &LmConfig,
    tc: &LmTrainConfig,
    train: &[StyledExample],
    valid: &[StyledExample],
    vocab: Vocab,
    seed: u64,
) -> Result<(LmWeights, LmTrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if config.vocab != vocab.size() {
        return Err(Error::Config(format!(
            "lm vocab {} does not match corpus vocab {}",
            config.vocab,
            vocab.size()
        )));
    }
    let mut weights = LmWeights::init(config, seed)?;
    let seqs = training_sequences(train, vocab);
    if let Some(s) = seqs.iter().find(|s| s.len() - 1 > config.context) {
        return Err(Error::ContextOverflow {
            len: s.len() - 1,
            max: config.context,
        });
    }
    let valid_seqs = {
        let src = if valid.is_empty() { train } else { valid };
        training_sequences(&src[..src.len().min(tc.valid_batch.max(1))], vocab)
    };
    let initial_valid_loss = weights.mean_loss(&valid_seqs)?;
    let bs = tc.batch_size.max(1);
    let per_epoch = seqs.len().div_ceil(bs);
    let schedule = LrSchedule {
        base: tc.lr,
        warmup_frac: tc.warmup_frac,
        total: per_epoch * tc.epochs,
        floor: 0.0,
    };
    let mut states: Vec<AdamState> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| AdamState::for_param(n, t))
        .collect();
    let mut rng = seeds::rng(seed, "lm-shuffle");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for _ in 0..tc.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut sum = 0.0f64;
        for batch in order.chunks(bs) {
            let batch_seqs: Vec<Vec<Token>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let diverged = |cause: String| Error::Diverged { step, cause };
            let mut g = Graph::new();
            let vars = weights.load(&mut g, true)?;
            let loss = weights
                .batch_loss(&mut g, &vars, &batch_seqs)
                .map_err(|e| diverged(e.to_string()))?;
            let lv = g.value(loss).item().unwrap_or(f32::NAN);
            if !lv.is_finite() {
                return Err(diverged("non-finite loss".into()));
            }
            sum += lv as f64;
            let mut grads = g.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let lr = schedule.lr_at(step + 1)? as f32;
            for ((param, state), var) in weights.tensors_mut().into_iter().zip(&mut states).zip(&vars) {
                let grad = grads.take(*var).unwrap_or_else(|| Tensor::zeros(param.shape()));
                adam_step(state, param, &grad, lr).map_err(|e| diverged(e.to_string()))?;
            }
            step += 1;
        }
        epoch_losses.push(sum / per_epoch as f64);
    }
    let final_valid_loss = weights.mean_loss(&valid_seqs)?;
    Ok((
        weights,
        LmTrainReport {
            steps: step,
            initial_valid_loss,
            final_valid_loss,
            epoch_losses,
        },
    ))
}
