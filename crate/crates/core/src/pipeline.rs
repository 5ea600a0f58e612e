// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage orchestration over a fixed artifact tree. Each stage reads its
//! inputs from files written by earlier stages, so any stage can be rerun on
//! its own.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acts::ActivationDump;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{Error, Result};
use crate::microlm::{self, GenerateOptions, HookSite, LmTrainReport, LmWeights, Sampler};
use crate::proto::{binomial_tail, fewshot_eval, FewshotResult, PrototypeBank, SourceKind, SteerTrace};
use crate::sae::{self, bank_sparsity, HeadBank, SaeTrainReport, SparsityStats};
use crate::seeds;
use crate::source::CodeSource;
use crate::steering::{converged_fraction, generate_steered, response_tokens, Method, SteerMode, SteerRequest, SteeredOutput};
use crate::stylegen::{self, BayesEstimate, Corpus, StyleSpec, StyledExample, Token};

/// Bumped whenever a path below changes.
pub const LAYOUT_VERSION: u32 = 1;

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn specs(&self) -> PathBuf {
        self.root.join("data/specs.json")
    }

    pub fn lm(&self) -> PathBuf {
        self.root.join("lm/weights.ck")
    }

    pub fn lm_report(&self) -> PathBuf {
        self.root.join("lm/train.json")
    }

    pub fn acts(&self) -> PathBuf {
        self.root.join("acts/train.acts")
    }

    pub fn sae_bank(&self) -> PathBuf {
        self.root.join("sae/bank.ck")
    }

    pub fn sae_report(&self) -> PathBuf {
        self.root.join("sae/train.json")
    }

    pub fn protos(&self, kind: SourceKind) -> PathBuf {
        self.root.join("protos").join(format!("{kind}.ck"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn traces(&self, label: &str) -> PathBuf {
        self.root.join("traces").join(label)
    }

    pub fn steer_tokens(&self, target: &str, mode: SteerMode) -> PathBuf {
        self.root.join("steer").join(format!("{target}-{mode}.tokens"))
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn sweep_value(&self, axis: SweepAxis, value: &str) -> Layout {
        Layout::new(self.root.join("sweeps").join(axis.to_string()).join(value))
    }
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(name),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format("json report", e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::format("csv", e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

fn fx(v: f64) -> String {
    format!("{v:.6}")
}

fn echo_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    write_file(&layout.config_echo(), cfg.to_toml().as_bytes())
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("pipeline worker panicked")?);
        }
        Ok(out)
    })
}

fn class_names(specs: &[StyleSpec]) -> Vec<String> {
    specs.iter().map(|s| s.name.clone()).collect()
}

// ---------------------------------------------------------------- data

pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Corpus, Vec<StyleSpec>)> {
    stage("gen-data", || {
        echo_config(cfg, layout)?;
        let corpus = stylegen::generate_corpus(&cfg.corpus)?;
        let specs = stylegen::build_specs(&cfg.corpus, cfg.corpus.seed)?;
        for (name, split) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
            let path = layout.split(name);
            ensure_parent(&path)?;
            stylegen::write_jsonl(&path, split)?;
        }
        stylegen::write_specs(&layout.specs(), &specs)?;
        Ok((corpus, specs))
    })
}

pub fn load_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Corpus, Vec<StyleSpec>)> {
    let vocab = cfg.corpus.vocab();
    let classes = cfg.corpus.classes;
    let read = |name: &str| {
        let path = layout.split(name);
        require(&path)?;
        stylegen::read_jsonl(&path, vocab, classes)
    };
    let corpus = Corpus {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    };
    require(&layout.specs())?;
    let specs = stylegen::read_specs(&layout.specs())?;
    if specs.len() != classes || specs[0].probs.len() != vocab.content {
        return Err(Error::Config(format!(
            "{} describes {} classes over {} tokens but the config has {} over {}; rerun gen-data",
            layout.specs().display(),
            specs.len(),
            specs[0].probs.len(),
            classes,
            vocab.content
        )));
    }
    Ok((corpus, specs))
}

// ---------------------------------------------------------------- model

pub fn train_lm(cfg: &ExperimentConfig, layout: &Layout) -> Result<(LmWeights, LmTrainReport)> {
    stage("train-lm", || {
        echo_config(cfg, layout)?;
        let (corpus, _) = load_data(cfg, layout)?;
        let (w, report) = microlm::train_lm(
            &cfg.lm,
            &cfg.lm_train,
            &corpus.train,
            &corpus.valid,
            cfg.corpus.vocab(),
            seeds::derive(cfg.seed, "lm"),
        )?;
        ensure_parent(&layout.lm())?;
        w.to_checkpoint().write(&layout.lm())?;
        write_json(&layout.lm_report(), &report)?;
        Ok((w, report))
    })
}

/// Loads the trained model and points its hook at the configured layer and
/// site. The architecture must match the config.
pub fn load_lm(cfg: &ExperimentConfig, layout: &Layout) -> Result<LmWeights> {
    let mut w = LmWeights::from_checkpoint(&Checkpoint::read(&layout.lm())?)?;
    let mut want = cfg.lm.clone();
    want.hook_layer = w.config.hook_layer;
    want.hook_site = w.config.hook_site;
    if want != w.config {
        return Err(Error::Config(format!(
            "{} was trained with a different architecture; rerun train-lm",
            layout.lm().display()
        )));
    }
    w.config.hook_layer = cfg.lm.hook_layer;
    w.config.hook_site = cfg.lm.hook_site;
    Ok(w)
}

/// Raw-query codes always read the query site.
fn lm_for(kind: SourceKind, lm: &LmWeights) -> Cow<'_, LmWeights> {
    if kind == SourceKind::RawQuery && lm.config.hook_site != HookSite::Query {
        let mut w = lm.clone();
        w.config.hook_site = HookSite::Query;
        Cow::Owned(w)
    } else {
        Cow::Borrowed(lm)
    }
}

// ---------------------------------------------------------------- sae

pub fn dump_acts(cfg: &ExperimentConfig, layout: &Layout) -> Result<ActivationDump> {
    stage("dump-acts", || {
        echo_config(cfg, layout)?;
        let (corpus, _) = load_data(cfg, layout)?;
        let lm = load_lm(cfg, layout)?;
        let dump = ActivationDump::capture(&lm, &corpus.train, cfg.corpus.vocab())?;
        ensure_parent(&layout.acts())?;
        dump.write(&layout.acts())?;
        Ok(dump)
    })
}

pub fn load_dump(cfg: &ExperimentConfig, layout: &Layout) -> Result<ActivationDump> {
    require(&layout.acts())?;
    let dump = ActivationDump::read(&layout.acts())?;
    if dump.layer != cfg.lm.hook_layer || dump.site != cfg.lm.hook_site {
        return Err(Error::Config(format!(
            "{} holds layer {} ({}) but the config hooks layer {} ({}); rerun dump-acts",
            layout.acts().display(),
            dump.layer,
            dump.site,
            cfg.lm.hook_layer,
            cfg.lm.hook_site
        )));
    }
    Ok(dump)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeStageOutput {
    pub bank: HeadBank,
    pub reports: Vec<SaeTrainReport>,
    /// Held-out sparsity averaged over heads.
    pub sparsity: SparsityStats,
}

impl SaeStageOutput {
    /// Final over initial held-out total loss, per head.
    pub fn loss_ratios(&self) -> Vec<f64> {
        self.reports
            .iter()
            .map(|r| r.last().total as f64 / r.initial().total as f64)
            .collect()
    }
}

/// Trains the configured bank on `dump` with the run seed, without writing it.
pub fn fit_bank(cfg: &ExperimentConfig, dump: &ActivationDump) -> Result<SaeStageOutput> {
    let (bank, reports) = sae::train_bank(dump, &cfg.sae, seeds::derive(cfg.seed, "sae"), cfg.jobs)?;
    let sparsity = bank_sparsity(&bank, dump)?;
    Ok(SaeStageOutput {
        bank,
        reports,
        sparsity,
    })
}

fn write_bank(layout: &Layout, out: &SaeStageOutput) -> Result<()> {
    ensure_parent(&layout.sae_bank())?;
    out.bank.to_checkpoint().write(&layout.sae_bank())?;
    write_json(&layout.sae_report(), &out.reports)?;
    let header: Vec<String> = [
        "head",
        "steps",
        "train_vectors",
        "heldout_vectors",
        "initial_heldout_loss",
        "final_heldout_loss",
        "loss_ratio",
        "max_column_norm",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = out
        .reports
        .iter()
        .zip(out.loss_ratios())
        .map(|(r, ratio)| {
            let max_norm = r.curve.iter().map(|p| p.max_column_norm as f64).fold(0.0, f64::max);
            vec![
                r.head.to_string(),
                r.steps.to_string(),
                r.train_vectors.to_string(),
                r.heldout_vectors.to_string(),
                fx(r.initial().total as f64),
                fx(r.last().total as f64),
                fx(ratio),
                fx(max_norm),
            ]
        })
        .collect();
    write_file(&layout.report("sae.csv"), &csv_bytes(&header, &rows)?)?;
    let s = &out.sparsity;
    let header: Vec<String> = ["layer", "site", "latent", "alpha", "penalty", "active_fraction", "dead_fraction", "recon_error"]
        .map(String::from)
        .to_vec();
    let row = vec![
        out.bank.layer.to_string(),
        out.bank.site.to_string(),
        out.bank.config.latent.to_string(),
        out.bank.config.alpha.to_string(),
        out.bank.config.penalty.to_string(),
        fx(s.active_fraction),
        fx(s.dead_fraction),
        fx(s.recon_error),
    ];
    write_file(&layout.report("sparsity.csv"), &csv_bytes(&header, &[row])?)
}

pub fn train_sae(cfg: &ExperimentConfig, layout: &Layout) -> Result<SaeStageOutput> {
    stage("train-sae", || {
        echo_config(cfg, layout)?;
        let dump = load_dump(cfg, layout)?;
        let out = fit_bank(cfg, &dump)?;
        write_bank(layout, &out)?;
        Ok(out)
    })
}

pub fn load_bank(cfg: &ExperimentConfig, layout: &Layout) -> Result<HeadBank> {
    let bank = HeadBank::from_checkpoint(&Checkpoint::read(&layout.sae_bank())?)?;
    if bank.layer != cfg.lm.hook_layer || bank.site != cfg.lm.hook_site {
        return Err(Error::Config(format!(
            "{} was trained at layer {} ({}) but the config hooks layer {} ({}); rerun train-sae",
            layout.sae_bank().display(),
            bank.layer,
            bank.site,
            cfg.lm.hook_layer,
            cfg.lm.hook_site
        )));
    }
    Ok(bank)
}

// ---------------------------------------------------------------- prototypes

/// Code kinds that get a prototype bank: the SAE source and the raw-query
/// baseline.
pub fn proto_kinds(cfg: &ExperimentConfig) -> [SourceKind; 2] {
    [cfg.sae_source(), SourceKind::RawQuery]
}

fn fit_protos(cfg: &ExperimentConfig, src: &CodeSource<'_>, train: &[StyledExample], specs: &[StyleSpec]) -> Result<PrototypeBank> {
    let classes = cfg.corpus.classes;
    let n = cfg.protos.support;
    let mut taken = vec![0usize; classes];
    let mut support = Vec::with_capacity(classes * n);
    for ex in train {
        if taken[ex.label] < n {
            taken[ex.label] += 1;
            support.push(ex);
        }
    }
    if let Some(k) = taken.iter().position(|&t| t < n) {
        if taken[k] == 0 {
            return Err(Error::MissingClass(specs[k].name.clone()));
        }
        return Err(Error::Config(format!(
            "training split has {} examples of class {}, need {n}",
            taken[k], specs[k].name
        )));
    }
    let codes = par_map(&support, cfg.jobs, |_, ex| Ok((ex.label, src.embed_example(ex)?)))?;
    PrototypeBank::from_codes(src.descriptor(), &codes, classes, &class_names(specs))
}

pub fn build_protos(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PrototypeBank>> {
    stage("build-protos", || {
        echo_config(cfg, layout)?;
        let (corpus, specs) = load_data(cfg, layout)?;
        let lm = load_lm(cfg, layout)?;
        let bank = load_bank(cfg, layout)?;
        let mut out = Vec::new();
        for kind in proto_kinds(cfg) {
            let lm_k = lm_for(kind, &lm);
            let src = CodeSource::new(kind, &lm_k, Some(&bank), cfg.protos.positions, cfg.corpus.vocab())?;
            let pb = fit_protos(cfg, &src, &corpus.train, &specs)?;
            let path = layout.protos(kind);
            ensure_parent(&path)?;
            pb.to_checkpoint().write(&path)?;
            out.push(pb);
        }
        Ok(out)
    })
}

pub fn load_protos(cfg: &ExperimentConfig, layout: &Layout, kind: SourceKind) -> Result<PrototypeBank> {
    let path = layout.protos(kind);
    let pb = PrototypeBank::from_checkpoint(&Checkpoint::read(&path)?)?;
    let d = &pb.source;
    if d.kind != kind || d.layer != cfg.lm.hook_layer || d.positions != cfg.protos.positions || pb.classes() != cfg.corpus.classes {
        return Err(Error::Config(format!(
            "{} was built for a different source, layer, or position selection; rerun build-protos",
            path.display()
        )));
    }
    Ok(pb)
}

// ---------------------------------------------------------------- few-shot

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotRow {
    pub kind: SourceKind,
    pub support: usize,
    pub result: FewshotResult,
    pub chance: f64,
    /// One-sided binomial tail of the hit count under chance accuracy.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    pub classes: Vec<String>,
    pub rows: Vec<FewshotRow>,
    /// Judge accuracy on fresh samples from the class distributions.
    pub bayes: BayesEstimate,
}

impl FewshotReport {
    pub fn row(&self, kind: SourceKind) -> Option<&FewshotRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut header: Vec<String> = [
            "source_kind",
            "support",
            "n",
            "accuracy",
            "chance",
            "p_value",
            "bayes_ceiling",
            "bayes_lower",
            "bayes_upper",
        ]
        .map(String::from)
        .to_vec();
        header.extend(self.classes.iter().map(|c| format!("acc_{c}")));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.kind.to_string(),
                    r.support.to_string(),
                    r.result.n.to_string(),
                    fx(r.result.accuracy),
                    fx(r.chance),
                    format!("{:.6e}", r.p_value),
                    fx(self.bayes.accuracy),
                    fx(self.bayes.lower),
                    fx(self.bayes.upper),
                ];
                row.extend(r.result.per_class.iter().map(|&a| fx(a)));
                row
            })
            .collect();
        csv_bytes(&header, &rows)
    }
}

fn fewshot_row(cfg: &ExperimentConfig, src: &CodeSource<'_>, pb: &PrototypeBank, test: &[StyledExample]) -> Result<FewshotRow> {
    let codes = par_map(test, cfg.jobs, |_, ex| Ok((ex.label, src.embed_example(ex)?)))?;
    let result = fewshot_eval(&codes, pb, cfg.steer.distance)?;
    let chance = 1.0 / pb.classes() as f64;
    let hits = (result.accuracy * result.n as f64).round() as usize;
    Ok(FewshotRow {
        kind: src.kind,
        support: pb.support,
        p_value: binomial_tail(hits, result.n, chance),
        result,
        chance,
    })
}

pub fn eval_fewshot(cfg: &ExperimentConfig, layout: &Layout) -> Result<FewshotReport> {
    stage("eval-fewshot", || {
        echo_config(cfg, layout)?;
        let banks = proto_kinds(cfg)
            .iter()
            .map(|&k| load_protos(cfg, layout, k))
            .collect::<Result<Vec<_>>>()?;
        let (corpus, specs) = load_data(cfg, layout)?;
        let lm = load_lm(cfg, layout)?;
        let bank = load_bank(cfg, layout)?;
        let mut rows = Vec::new();
        for pb in &banks {
            let kind = pb.source.kind;
            let lm_k = lm_for(kind, &lm);
            let src = CodeSource::new(kind, &lm_k, Some(&bank), cfg.protos.positions, cfg.corpus.vocab())?;
            rows.push(fewshot_row(cfg, &src, pb, &corpus.test)?);
        }
        let bayes = stylegen::bayes_reference(&specs, &cfg.corpus, cfg.eval.bayes_samples, seeds::derive(cfg.seed, "bayes"))?;
        let report = FewshotReport {
            classes: class_names(&specs),
            rows,
            bayes,
        };
        write_file(&layout.report("fewshot.csv"), &report.to_csv()?)?;
        write_json(&layout.report("fewshot.json"), &report)?;
        Ok(report)
    })
}

// ---------------------------------------------------------------- steering

/// Judge outcome of one (source, target) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerCell {
    pub source: usize,
    pub target: usize,
    pub n: usize,
    /// Judge class counts of the steered and unsteered generations.
    pub steered: Vec<usize>,
    pub unsteered: Vec<usize>,
    pub mean_iterations: f64,
    /// Mean judge log-likelihood margin of the target on steered outputs.
    pub mean_margin: f64,
    /// Across-example variance of the steered pooled codes, averaged over
    /// code dimensions. Recode mode only.
    pub code_variance: Option<f64>,
    pub converged: f64,
}

impl SteerCell {
    pub fn target_fraction(&self) -> f64 {
        self.steered[self.target] as f64 / self.n as f64
    }

    pub fn unsteered_fraction(&self) -> f64 {
        self.unsteered[self.target] as f64 / self.n as f64
    }

    pub fn uplift(&self) -> f64 {
        self.target_fraction() - self.unsteered_fraction()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub label: String,
    pub kind: SourceKind,
    pub method: Method,
    pub mode: SteerMode,
    pub classes: Vec<String>,
    pub cells: Vec<SteerCell>,
}

pub fn method_label(kind: SourceKind, method: Method) -> String {
    format!("{kind}-{method}")
}

impl SteerReport {
    pub fn cell(&self, source: usize, target: usize) -> Option<&SteerCell> {
        self.cells.iter().find(|c| c.source == source && c.target == target)
    }

    /// Targets of `source` whose steered fraction beats the unsteered one.
    pub fn improved_targets(&self, source: usize) -> usize {
        self.cells
            .iter()
            .filter(|c| c.source == source && c.target_fraction() > c.unsteered_fraction())
            .count()
    }

    fn mean_over_cells(&self, f: impl Fn(&SteerCell) -> f64) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().map(f).sum::<f64>() / self.cells.len() as f64
    }

    pub fn mean_target_fraction(&self) -> f64 {
        self.mean_over_cells(SteerCell::target_fraction)
    }

    pub fn mean_unsteered_fraction(&self) -> f64 {
        self.mean_over_cells(SteerCell::unsteered_fraction)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut header: Vec<String> = [
            "source",
            "target",
            "n",
            "target_fraction",
            "unsteered_fraction",
            "uplift",
            "mean_iterations",
            "mean_margin",
            "code_variance",
            "converged",
        ]
        .map(String::from)
        .to_vec();
        header.extend(self.classes.iter().map(|c| format!("steered_{c}")));
        header.extend(self.classes.iter().map(|c| format!("unsteered_{c}")));
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                let mut row = vec![
                    self.classes[c.source].clone(),
                    self.classes[c.target].clone(),
                    c.n.to_string(),
                    fx(c.target_fraction()),
                    fx(c.unsteered_fraction()),
                    fx(c.uplift()),
                    fx(c.mean_iterations),
                    fx(c.mean_margin),
                    c.code_variance.map_or_else(|| "na".to_string(), |v| format!("{v:.6e}")),
                    fx(c.converged),
                ];
                row.extend(c.steered.iter().map(|k| k.to_string()));
                row.extend(c.unsteered.iter().map(|k| k.to_string()));
                row
            })
            .collect();
        csv_bytes(&header, &rows)
    }
}

/// Generation prompts of the first `prompts_per_cell` test examples of a
/// class. Every method sees the same prompts.
pub fn eval_prompts(cfg: &ExperimentConfig, test: &[StyledExample], source: usize) -> Result<Vec<Vec<Token>>> {
    let vocab = cfg.corpus.vocab();
    let prompts: Vec<Vec<Token>> = test
        .iter()
        .filter(|e| e.label == source)
        .take(cfg.eval.prompts_per_cell)
        .map(|e| e.generation_prompt(vocab))
        .collect();
    if prompts.len() < cfg.eval.prompts_per_cell {
        return Err(Error::Config(format!(
            "test split has {} prompts of class {source}, need {}",
            prompts.len(),
            cfg.eval.prompts_per_cell
        )));
    }
    Ok(prompts)
}

pub fn generate_options(cfg: &ExperimentConfig) -> GenerateOptions {
    let mut g = GenerateOptions::for_vocab(cfg.corpus.vocab(), cfg.eval.max_new);
    g.min_new = cfg.min_new().min(cfg.eval.max_new).max(1);
    g.sampler = cfg.eval.sampler;
    g
}

/// Inputs shared by every cell of a steering evaluation.
pub struct SteerSetup<'a> {
    pub cfg: &'a ExperimentConfig,
    pub source: &'a CodeSource<'a>,
    pub bank: &'a PrototypeBank,
    pub specs: &'a [StyleSpec],
    pub method: Method,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    prompt: usize,
    unsteered: &'a [Token],
    steered: &'a [Token],
    unsteered_class: usize,
    steered_class: usize,
    traces: &'a [SteerTrace],
}

impl SteerSetup<'_> {
    /// Steered and unsteered generations for the prompts of `source`. A
    /// sampler seed depends on the source and prompt index only, so every
    /// target and method sees the same random draws for a prompt.
    pub fn run(&self, prompts: &[Vec<Token>], source: usize, target: usize) -> Result<Vec<SteeredOutput>> {
        let base = generate_options(self.cfg);
        par_map(prompts, self.cfg.jobs, |i, p| {
            let mut gen = base.clone();
            if let Sampler::Temperature { seed, .. } = &mut gen.sampler {
                *seed = seeds::derive(*seed, &format!("prompt-{source}-{i}"));
            }
            let req = SteerRequest {
                source: self.source,
                bank: self.bank,
                target,
                mode: self.cfg.eval.mode,
                method: self.method,
                config: &self.cfg.steer,
                generate: &gen,
            };
            generate_steered(&req, p)
        })
    }

    /// Runs one cell and returns it with one JSON trace line per prompt.
    pub fn cell(&self, prompts: &[Vec<Token>], source: usize, target: usize) -> Result<(SteerCell, Vec<u8>)> {
        let outs = self.run(prompts, source, target)?;
        let c = self.specs.len();
        let mut cell = SteerCell {
            source,
            target,
            n: outs.len(),
            steered: vec![0; c],
            unsteered: vec![0; c],
            mean_iterations: 0.0,
            mean_margin: 0.0,
            code_variance: None,
            converged: 0.0,
        };
        let mut lines = Vec::new();
        let mut all_traces = Vec::new();
        for (i, o) in outs.iter().enumerate() {
            let (u, s) = (response_tokens(&o.unsteered), response_tokens(&o.steered));
            let vu = stylegen::judge(u, self.specs)?;
            let vs = stylegen::judge(s, self.specs)?;
            cell.unsteered[vu.class] += 1;
            cell.steered[vs.class] += 1;
            cell.mean_iterations += o.mean_iterations();
            cell.mean_margin += vs.margin(target);
            all_traces.extend(o.traces.iter().cloned());
            let rec = TraceRecord {
                prompt: i,
                unsteered: u,
                steered: s,
                unsteered_class: vu.class,
                steered_class: vs.class,
                traces: &o.traces,
            };
            serde_json::to_writer(&mut lines, &rec).map_err(|e| Error::format("trace", e.to_string()))?;
            lines.push(b'\n');
        }
        let n = outs.len().max(1) as f64;
        cell.mean_iterations /= n;
        cell.mean_margin /= n;
        cell.converged = converged_fraction(&all_traces);
        let codes: Vec<&Vec<f64>> = outs.iter().filter_map(|o| o.code.as_ref().map(|(_, z)| z)).collect();
        if !codes.is_empty() && codes.len() == outs.len() {
            cell.code_variance = Some(code_variance(&codes));
        }
        Ok((cell, lines))
    }

    /// Every (source, target ≠ source) cell for the configured sources.
    pub fn report(&self, test: &[StyledExample], layout: Option<&Layout>) -> Result<SteerReport> {
        let label = method_label(self.source.kind, self.method);
        let mut cells = Vec::new();
        for &source in &self.cfg.eval.sources {
            let prompts = eval_prompts(self.cfg, test, source)?;
            for target in (0..self.specs.len()).filter(|&t| t != source) {
                let (cell, lines) = self.cell(&prompts, source, target)?;
                if let Some(l) = layout {
                    write_file(&l.traces(&label).join(format!("s{source}-t{target}.jsonl")), &lines)?;
                }
                cells.push(cell);
            }
        }
        Ok(SteerReport {
            label,
            kind: self.source.kind,
            method: self.method,
            mode: self.cfg.eval.mode,
            classes: class_names(self.specs),
            cells,
        })
    }
}

/// Population variance across codes, averaged over dimensions.
pub fn code_variance(codes: &[&Vec<f64>]) -> f64 {
    let n = codes.len() as f64;
    let d = codes[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = codes.iter().map(|z| z[j]).sum::<f64>() / n;
        total += codes.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / n;
    }
    total / d.max(1) as f64
}

fn write_steer_report(layout: &Layout, report: &SteerReport) -> Result<()> {
    write_file(&layout.report(&format!("steer-{}.csv", report.label)), &report.to_csv()?)?;
    write_json(&layout.report(&format!("steer-{}.json", report.label)), report)
}

struct Loaded {
    corpus: Corpus,
    specs: Vec<StyleSpec>,
    lm: LmWeights,
    bank: Option<HeadBank>,
    protos: PrototypeBank,
}

fn load_for(cfg: &ExperimentConfig, layout: &Layout, kind: SourceKind) -> Result<Loaded> {
    let protos = load_protos(cfg, layout, kind)?;
    let (corpus, specs) = load_data(cfg, layout)?;
    let lm = lm_for(kind, &load_lm(cfg, layout)?).into_owned();
    let bank = if kind.uses_sae() { Some(load_bank(cfg, layout)?) } else { None };
    Ok(Loaded {
        corpus,
        specs,
        lm,
        bank,
        protos,
    })
}

fn steer_eval_inner(cfg: &ExperimentConfig, layout: &Layout, kind: SourceKind, method: Method) -> Result<SteerReport> {
    let l = load_for(cfg, layout, kind)?;
    let src = CodeSource::new(kind, &l.lm, l.bank.as_ref(), cfg.protos.positions, cfg.corpus.vocab())?;
    let setup = SteerSetup {
        cfg,
        source: &src,
        bank: &l.protos,
        specs: &l.specs,
        method,
    };
    let report = setup.report(&l.corpus.test, Some(layout))?;
    write_steer_report(layout, &report)?;
    Ok(report)
}

/// Steering evaluation of one code source and method over every cell.
pub fn eval_steer(cfg: &ExperimentConfig, layout: &Layout, kind: SourceKind, method: Method) -> Result<SteerReport> {
    stage("eval-steer", || {
        echo_config(cfg, layout)?;
        steer_eval_inner(cfg, layout, kind, method)
    })
}

/// Steers the evaluation prompts of every configured source class toward
/// `target` and writes the unsteered and steered tokens, one prompt per
/// line.
pub fn steer(cfg: &ExperimentConfig, layout: &Layout, target: usize, kind: SourceKind, method: Method) -> Result<PathBuf> {
    stage("steer", || {
        echo_config(cfg, layout)?;
        let l = load_for(cfg, layout, kind)?;
        if target >= l.specs.len() {
            return Err(Error::Config(format!("target class {target} outside 0..{}", l.specs.len())));
        }
        let src = CodeSource::new(kind, &l.lm, l.bank.as_ref(), cfg.protos.positions, cfg.corpus.vocab())?;
        let setup = SteerSetup {
            cfg,
            source: &src,
            bank: &l.protos,
            specs: &l.specs,
            method,
        };
        let join = |t: &[Token]| t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        let mut text = String::from("# source\tprompt\tunsteered\tsteered\n");
        for &source in &cfg.eval.sources {
            let prompts = eval_prompts(cfg, &l.corpus.test, source)?;
            for (i, o) in setup.run(&prompts, source, target)?.iter().enumerate() {
                text.push_str(&format!(
                    "{source}\t{i}\t{}\t{}\n",
                    join(response_tokens(&o.unsteered)),
                    join(response_tokens(&o.steered))
                ));
            }
        }
        let path = layout.steer_tokens(&l.specs[target].name, cfg.eval.mode);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    })
}

// ---------------------------------------------------------------- baselines

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub rank: usize,
    pub label: String,
    pub kind: SourceKind,
    pub method: Method,
    pub mean_target_fraction: f64,
    pub mean_unsteered_fraction: f64,
    pub improved_targets: usize,
    pub cells: usize,
    pub mean_code_variance: Option<f64>,
}

impl MethodSummary {
    pub fn of(report: &SteerReport) -> Self {
        let vars: Option<Vec<f64>> = report.cells.iter().map(|c| c.code_variance).collect();
        Self {
            rank: 0,
            label: report.label.clone(),
            kind: report.kind,
            method: report.method,
            mean_target_fraction: report.mean_target_fraction(),
            mean_unsteered_fraction: report.mean_unsteered_fraction(),
            improved_targets: report
                .cells
                .iter()
                .filter(|c| c.target_fraction() > c.unsteered_fraction())
                .count(),
            cells: report.cells.len(),
            mean_code_variance: vars
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64),
        }
    }
}

/// Ranks by mean target fraction, best first; ties keep label order.
pub fn rank_methods(reports: &[SteerReport]) -> Vec<MethodSummary> {
    let mut out: Vec<MethodSummary> = reports.iter().map(MethodSummary::of).collect();
    out.sort_by(|a, b| {
        b.mean_target_fraction
            .total_cmp(&a.mean_target_fraction)
            .then_with(|| a.label.cmp(&b.label))
    });
    for (i, m) in out.iter_mut().enumerate() {
        m.rank = i + 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub methods: Vec<MethodSummary>,
    pub reports: Vec<SteerReport>,
}

fn methods_csv(methods: &[MethodSummary]) -> Result<Vec<u8>> {
    let header: Vec<String> = [
        "rank",
        "method",
        "source_kind",
        "mean_target_fraction",
        "mean_unsteered_fraction",
        "mean_uplift",
        "improved_targets",
        "cells",
        "mean_code_variance",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|m| {
            vec![
                m.rank.to_string(),
                m.label.clone(),
                m.kind.to_string(),
                fx(m.mean_target_fraction),
                fx(m.mean_unsteered_fraction),
                fx(m.mean_target_fraction - m.mean_unsteered_fraction),
                m.improved_targets.to_string(),
                m.cells.to_string(),
                m.mean_code_variance.map_or_else(|| "na".to_string(), |v| format!("{v:.6e}")),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// SAE gradient steering against raw-query steering and direct assignment,
/// all on the same prompts. `main` reuses an already computed SAE gradient
/// report.
pub fn baselines(cfg: &ExperimentConfig, layout: &Layout, main: Option<SteerReport>) -> Result<BaselineComparison> {
    stage("baselines", || {
        echo_config(cfg, layout)?;
        let sae_kind = cfg.sae_source();
        let main = match main {
            Some(r) => r,
            None => steer_eval_inner(cfg, layout, sae_kind, Method::Gradient)?,
        };
        let raw = steer_eval_inner(cfg, layout, SourceKind::RawQuery, Method::Gradient)?;
        let direct = steer_eval_inner(cfg, layout, sae_kind, Method::DirectAssign)?;
        let reports = vec![main, raw, direct];
        let methods = rank_methods(&reports);
        write_file(&layout.report("baselines.csv"), &methods_csv(&methods)?)?;
        Ok(BaselineComparison { methods, reports })
    })
}

// ---------------------------------------------------------------- sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub fewshot_accuracy: f64,
    pub sparsity: SparsityStats,
    /// Mean over heads of final over initial held-out loss.
    pub loss_ratio: f64,
    pub mean_target_fraction: f64,
    pub mean_unsteered_fraction: f64,
    pub improved_targets: usize,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub outcome: std::result::Result<SweepMetrics, String>,
}

/// One config per value of `axis`, everything else shared.
pub fn sweep_variants(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<(String, ExperimentConfig)> {
    let s = &cfg.sweep;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        SweepAxis::Layer => s.layers.iter().map(|&l| (l.to_string(), with(&|c| c.lm.hook_layer = l))).collect(),
        SweepAxis::Alpha => s.alphas.iter().map(|&a| (a.to_string(), with(&|c| c.sae.alpha = a))).collect(),
        SweepAxis::Latent => s.latents.iter().map(|&h| (h.to_string(), with(&|c| c.sae.latent = h))).collect(),
        SweepAxis::Penalty => s.penalties.iter().map(|&p| (p.to_string(), with(&|c| c.sae.penalty = p))).collect(),
        SweepAxis::Site => s.sites.iter().map(|&t| (t.to_string(), with(&|c| c.lm.hook_site = t))).collect(),
    }
}

fn evaluate_variant(cfg: &ExperimentConfig, sub: &Layout, corpus: &Corpus, specs: &[StyleSpec], base: &LmWeights) -> Result<SweepMetrics> {
    cfg.validate()?;
    echo_config(cfg, sub)?;
    let mut lm = base.clone();
    lm.config.hook_layer = cfg.lm.hook_layer;
    lm.config.hook_site = cfg.lm.hook_site;
    let vocab = cfg.corpus.vocab();
    let fit = {
        let dump = ActivationDump::capture(&lm, &corpus.train, vocab)?;
        fit_bank(cfg, &dump)?
    };
    write_bank(sub, &fit)?;
    let src = CodeSource::new(cfg.sae_source(), &lm, Some(&fit.bank), cfg.protos.positions, vocab)?;
    let pb = fit_protos(cfg, &src, &corpus.train, specs)?;
    write_file(&sub.protos(src.kind), &pb.to_checkpoint().encode())?;
    let fs = fewshot_row(cfg, &src, &pb, &corpus.test)?;
    let setup = SteerSetup {
        cfg,
        source: &src,
        bank: &pb,
        specs,
        method: Method::Gradient,
    };
    let report = setup.report(&corpus.test, Some(sub))?;
    write_steer_report(sub, &report)?;
    let ratios = fit.loss_ratios();
    let summary = MethodSummary::of(&report);
    Ok(SweepMetrics {
        fewshot_accuracy: fs.result.accuracy,
        sparsity: fit.sparsity,
        loss_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        mean_target_fraction: summary.mean_target_fraction,
        mean_unsteered_fraction: summary.mean_unsteered_fraction,
        improved_targets: summary.improved_targets,
        cells: summary.cells,
    })
}

fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let header: Vec<String> = [
        "axis",
        "value",
        "status",
        "fewshot_accuracy",
        "active_fraction",
        "dead_fraction",
        "recon_error",
        "loss_ratio",
        "mean_target_fraction",
        "mean_unsteered_fraction",
        "improved_targets",
        "cells",
        "error",
    ]
    .map(String::from)
    .to_vec();
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.axis.to_string(), r.value.clone()];
            match &r.outcome {
                Ok(m) => row.extend([
                    "ok".to_string(),
                    fx(m.fewshot_accuracy),
                    fx(m.sparsity.active_fraction),
                    fx(m.sparsity.dead_fraction),
                    fx(m.sparsity.recon_error),
                    fx(m.loss_ratio),
                    fx(m.mean_target_fraction),
                    fx(m.mean_unsteered_fraction),
                    m.improved_targets.to_string(),
                    m.cells.to_string(),
                    String::new(),
                ]),
                Err(e) => {
                    row.push("failed".to_string());
                    row.extend(std::iter::repeat_n(String::new(), 9));
                    row.push(e.clone());
                }
            }
            row
        })
        .collect();
    csv_bytes(&header, &out)
}

/// One full evaluation (activations, SAE bank, prototypes, few-shot,
/// steering) per value of `axis`, sharing the corpus and trained model.
/// A failing value is recorded in its row and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, layout: &Layout, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    stage("sweep", || {
        echo_config(cfg, layout)?;
        let (corpus, specs) = load_data(cfg, layout)?;
        let base = load_lm(cfg, layout)?;
        let mut rows = Vec::new();
        for (value, vcfg) in sweep_variants(cfg, axis) {
            let sub = layout.sweep_value(axis, &value);
            let outcome = evaluate_variant(&vcfg, &sub, &corpus, &specs, &base).map_err(|e| e.to_string());
            rows.push(SweepRow { axis, value, outcome });
            // Rewritten after every value so a killed sweep keeps its rows.
            write_file(&layout.report(&format!("sweep-{axis}.csv")), &sweep_csv(&rows)?)?;
        }
        Ok(rows)
    })
}

// ---------------------------------------------------------------- run-all

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lm: LmTrainReport,
    pub sae_loss_ratios: Vec<f64>,
    pub sparsity: SparsityStats,
    pub fewshot: FewshotReport,
    /// Improved targets per configured source class, SAE gradient steering.
    pub improved_targets: Vec<(usize, usize)>,
    pub methods: Vec<MethodSummary>,
}

/// Every stage in order, then the run summary and manifest.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<RunSummary> {
    gen_data(cfg, layout)?;
    let (_, lm) = train_lm(cfg, layout)?;
    dump_acts(cfg, layout)?;
    let sae = train_sae(cfg, layout)?;
    build_protos(cfg, layout)?;
    let fewshot = eval_fewshot(cfg, layout)?;
    let main = eval_steer(cfg, layout, cfg.sae_source(), Method::Gradient)?;
    let improved_targets = cfg.eval.sources.iter().map(|&s| (s, main.improved_targets(s))).collect();
    let cmp = baselines(cfg, layout, Some(main))?;
    let summary = RunSummary {
        lm,
        sae_loss_ratios: sae.loss_ratios(),
        sparsity: sae.sparsity,
        fewshot,
        improved_targets,
        methods: cmp.methods,
    };
    stage("run-all", || {
        write_json(&layout.report("summary.json"), &summary)?;
        write_manifest(layout)?;
        Ok(())
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout_version: u32,
    pub files: Vec<ManifestEntry>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file under the output directory with its size and hash, sorted by
/// path.
pub fn build_manifest(layout: &Layout) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(layout.root(), &mut paths)?;
    let manifest = layout.manifest();
    let mut files = Vec::new();
    for p in paths.into_iter().filter(|p| *p != manifest) {
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let rel = p.strip_prefix(layout.root()).expect("walked under root");
        let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        files.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest {
        layout_version: LAYOUT_VERSION,
        files,
    })
}

pub fn write_manifest(layout: &Layout) -> Result<Manifest> {
    let m = build_manifest(layout)?;
    write_json(&layout.manifest(), &m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_variance_hand_example() {
        let a = vec![1.0, 0.0];
        let b = vec![3.0, 0.0];
        assert_eq!(code_variance(&[&a, &b]), 0.5);
        assert_eq!(code_variance(&[&a, &a, &a]), 0.0);
    }

    #[test]
    fn ranking_is_by_target_fraction() {
        let cell = |steered: Vec<usize>| SteerCell {
            source: 0,
            target: 1,
            n: 4,
            steered,
            unsteered: vec![4, 0],
            mean_iterations: 0.0,
            mean_margin: 0.0,
            code_variance: None,
            converged: 0.0,
        };
        let report = |label: &str, steered| SteerReport {
            label: label.into(),
            kind: SourceKind::SaeQuery,
            method: Method::Gradient,
            mode: SteerMode::Recode,
            classes: vec!["a".into(), "b".into()],
            cells: vec![cell(steered)],
        };
        let ranked = rank_methods(&[report("x", vec![3, 1]), report("y", vec![1, 3]), report("w", vec![3, 1])]);
        let order: Vec<&str> = ranked.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(order, ["y", "w", "x"]);
        assert_eq!(ranked[0].rank, 1);
        assert_eq!(ranked[0].improved_targets, 1);
    }

    #[test]
    fn sweep_variants_cover_each_value() {
        let cfg = ExperimentConfig::default();
        assert_eq!(sweep_variants(&cfg, SweepAxis::Latent).len(), 4);
        let alphas = sweep_variants(&cfg, SweepAxis::Alpha);
        assert_eq!(alphas.iter().map(|(v, _)| v.as_str()).collect::<Vec<_>>(), ["0.0003", "0.003", "0.03"]);
        assert_eq!(alphas[2].1.sae.alpha, 3e-2);
        let sites = sweep_variants(&cfg, SweepAxis::Site);
        assert_eq!(sites[1].1.lm.hook_site, HookSite::Residual);
    }

    #[test]
    fn missing_data_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let err = load_data(&ExperimentConfig::default(), &layout).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(p) if p.ends_with("data/train.jsonl")));
    }
}
