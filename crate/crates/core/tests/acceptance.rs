// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run: one pass/fail line per criterion.
//!
//! `cargo test -p protosteer --test acceptance -- [N ...]` runs the
//! listed criteria (all by default). Criteria 3 to 10 share one default
//! pipeline run, a second run for the determinism check and four SAE
//! retrains, roughly seventeen minutes on one core.
//!
//! Environment:
//! - `PROTOSTEER_ACCEPTANCE_DIR`: keep run artifacts here instead of a temp dir.
//! - `PROTOSTEER_ACCEPTANCE_STRICT=1`: exit nonzero when any criterion fails.
//! - `PROTOSTEER_BLESS=1`: rewrite the pinned steering fixture.

#[path = "../../numkit/tests/support/op_suite.rs"]
#[allow(dead_code)]
mod op_suite;
#[path = "support/sae_reference.rs"]
mod sae_reference;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use protosteer::acts::{ActivationDump, Positions};
use protosteer::checkpoint::Checkpoint;
use protosteer::config::ExperimentConfig;
use protosteer::microlm::InterventionPlan;
use protosteer::pipeline::{self, Layout, RunSummary, SteerReport};
use protosteer::proto::{
    classify, log_prob_target, steer, steer_grad, Distance, PrototypeBank, SourceDescriptor, SourceKind,
    SteerConfig,
};
use protosteer::sae::{bank_sparsity, Penalty, SaeTrainReport};
use protosteer::seeds;
use protosteer::source::CodeSource;
use protosteer::steering::Method;
use rand::Rng;
use serde::{Deserialize, Serialize};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Artifacts shared by criteria 3 to 10.
struct Runs {
    cfg: ExperimentConfig,
    a: Layout,
    b: Layout,
    summary: RunSummary,
    elapsed_a: Duration,
}

fn run_dirs() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("PROTOSTEER_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().expect("temp dir");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn default_config(out: &Path) -> ExperimentConfig {
    let text = include_str!("../../../configs/default.toml");
    let out = serde_json::to_string(&out.to_string_lossy()).unwrap();
    ExperimentConfig::from_toml_with(text, &[format!("out_dir={out}")]).expect("default config")
}

fn pipeline_runs(root: &Path, second: bool) -> Runs {
    let a = Layout::new(root.join("a"));
    let b = Layout::new(root.join("b"));
    let cfg = default_config(a.root());
    let t = Instant::now();
    let summary = pipeline::run_all(&cfg, &a).expect("default run");
    let elapsed_a = t.elapsed();
    eprintln!("default run finished in {:.0}s", elapsed_a.as_secs_f64());
    if second {
        pipeline::run_all(&default_config(b.root()), &b).expect("second default run");
        eprintln!("second run finished");
    }
    Runs {
        cfg,
        a,
        b,
        summary,
        elapsed_a,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> T {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn steer_report(layout: &Layout, kind: SourceKind, method: Method) -> SteerReport {
    read_json(&layout.report(&format!("steer-{}.json", pipeline::method_label(kind, method))))
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let mut instances = 0;
    for case in op_suite::cases() {
        let (err, _) = case.worst(op_suite::INSTANCES);
        instances += op_suite::INSTANCES;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, case.name);
        }
    }
    let n_ops = op_suite::cases().len();
    let mut sae_worst = 0.0f64;
    for penalty in [Penalty::L1, Penalty::L2] {
        for seed in 0..24 {
            let (params, q, cfg) = sae_reference::instance(seed, penalty);
            sae_worst = sae_worst.max(sae_reference::rel_error(&params, &q, &cfg));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-3 && sae_worst <= 1e-3 && secs < 30.0,
        format!(
            "worst op relative error {:.2e} ({}) over {n_ops} ops and {instances} instances; SAE loss worst {sae_worst:.2e} over 48 instances; {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn bank_of(protos: Vec<Vec<f32>>) -> PrototypeBank {
    let w = protos[0].len();
    let codes: Vec<(usize, Vec<f32>)> = protos.into_iter().enumerate().collect();
    let c = codes.len();
    let desc = SourceDescriptor {
        kind: SourceKind::RawQuery,
        layer: 0,
        positions: Positions::All,
        slices: 1,
        slice_width: w,
    };
    PrototypeBank::from_codes(desc, &codes, c, &[]).unwrap()
}

fn steering_gradient() -> Outcome {
    let mut rng = seeds::rng(2, "acceptance-steer-grad");
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 200 {
        let c = rng.gen_range(2..7);
        let d = rng.gen_range(1..9);
        let protos: Vec<Vec<f32>> = (0..c).map(|_| (0..d).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = bank_of(protos);
        let nearest = protosteer::proto::distances(&z, &b, Distance::L2).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        if nearest < 1e-2 {
            continue;
        }
        let target = rng.gen_range(0..c);
        let g = steer_grad(&z, &b, target, Distance::L2).unwrap();
        let h = 1e-6;
        for j in 0..d {
            let mut p = z.clone();
            p[j] += h;
            let mut m = z.clone();
            m[j] -= h;
            let fd = (log_prob_target(&p, &b, target, Distance::L2).unwrap()
                - log_prob_target(&m, &b, target, Distance::L2).unwrap())
                / (2.0 * h);
            worst = worst.max((g[j] - fd).abs());
        }
        checked += 1;
    }

    let b = bank_of(vec![vec![0.0], vec![1.0]]);
    let p = classify(&[0.25], &b, Distance::L2).unwrap();
    let g = steer_grad(&[0.25], &b, 1, Distance::L2).unwrap()[0];
    let expected_g = 1.0 + p[0] - p[1];
    let cfg = SteerConfig {
        eta: 0.1,
        max_iters: 1,
        ..SteerConfig::default()
    };
    let (z1, _) = steer(&[0.25], &b, 1, &cfg, false).unwrap();
    let hand = 0.25 + 0.1 * (1.0 + 0.25f64.tanh());
    let one_d = (g - expected_g).abs() < 1e-12 && (z1[0] - hand).abs() < 1e-6 && (z1[0] - 0.3745).abs() < 1e-4;
    outcome(
        worst <= 1e-6 && one_d,
        format!(
            "max |analytic - numeric| {worst:.2e} over {checked} points; 1-D gradient {g:.6} = 1 + p0 - p1, one step {:.7} (hand value {hand:.7})",
            z1[0]
        ),
    )
}

// ---------------------------------------------------------------- 3

fn intervention_identity(runs: &Runs) -> Outcome {
    let lm = pipeline::load_lm(&runs.cfg, &runs.a).unwrap();
    let (corpus, _) = pipeline::load_data(&runs.cfg, &runs.a).unwrap();
    let vocab = runs.cfg.corpus.vocab();
    let mut rng = seeds::rng(3, "acceptance-intervene");
    let mut inputs: Vec<Vec<u32>> = (0..8)
        .map(|_| corpus.test[rng.gen_range(0..corpus.test.len())].sequence(vocab).0)
        .collect();
    for _ in 0..8 {
        let len = rng.gen_range(1..runs.cfg.lm.context);
        inputs.push((0..len).map(|_| rng.gen_range(0..vocab.size() as u32)).collect());
    }
    let mut same = 0;
    for toks in &inputs {
        let (logits, cap) = lm.forward_capture(toks).unwrap();
        let replay = lm.forward_intervene(toks, &InterventionPlan::from_capture(&cap)).unwrap();
        if logits.data().iter().zip(replay.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            same += 1;
        }
    }
    outcome(
        same == inputs.len(),
        format!("{same}/{} trained-model inputs bitwise identical", inputs.len()),
    )
}

// ---------------------------------------------------------------- 4 and 5

struct BankRun {
    alpha: f32,
    penalty: Penalty,
    active_fraction: f64,
    secs: f64,
}

fn train_variant(runs: &Runs, dump: &ActivationDump, alpha: f32, penalty: Penalty) -> (pipeline::SaeStageOutput, BankRun) {
    let mut cfg = runs.cfg.clone();
    cfg.sae.alpha = alpha;
    cfg.sae.penalty = penalty;
    let t = Instant::now();
    let out = pipeline::fit_bank(&cfg, dump).unwrap();
    let secs = t.elapsed().as_secs_f64();
    eprintln!("trained SAE bank alpha={alpha} penalty={penalty} in {secs:.0}s");
    let active_fraction = out.sparsity.active_fraction;
    (
        out,
        BankRun {
            alpha,
            penalty,
            active_fraction,
            secs,
        },
    )
}

fn sae_training(runs: &Runs, default_bank: &BankRun, retrained_matches: bool) -> Outcome {
    let reports: Vec<SaeTrainReport> = read_json(&runs.a.sae_report());
    let worst_ratio = reports
        .iter()
        .map(|r| r.last().total / r.initial().total)
        .fold(0.0, f64::max);
    let worst_norm = reports
        .iter()
        .flat_map(|r| r.curve.iter().map(|p| p.max_column_norm))
        .fold(0.0, f64::max);
    let logged = reports.iter().map(|r| r.curve.len()).sum::<usize>();
    let bank = pipeline::load_bank(&runs.cfg, &runs.a).unwrap();
    let dump = pipeline::load_dump(&runs.cfg, &runs.a).unwrap();
    let every = runs.cfg.sae.holdout_every;
    let held: Vec<usize> = (0..dump.records.len()).filter(|i| i % every == every - 1).collect();
    let mut codes = 0usize;
    let mut negative = 0usize;
    for (h, sae) in bank.prepared().unwrap().iter().enumerate() {
        let q = dump.head_matrix(h, runs.cfg.sae.positions, held.iter().copied()).unwrap();
        let (n, d) = q.dims2().unwrap();
        for r in 0..n {
            let z = sae.encode(&q.data()[r * d..(r + 1) * d]).unwrap();
            codes += z.len();
            negative += z.iter().filter(|&&v| v < 0.0).count();
        }
    }
    let secs = default_bank.secs;
    outcome(
        worst_ratio <= 0.5 && worst_norm <= 1.0 + 1e-6 && negative == 0 && secs < 180.0 && retrained_matches,
        format!(
            "worst held-out loss ratio {worst_ratio:.4}; max column norm {worst_norm:.7} over {logged} logged steps; {negative} negative of {codes} held-out code entries; bank trained in {secs:.0}s{}",
            if retrained_matches { "" } else { "; retrained bank differs from the run's bank" }
        ),
    )
}

fn sparsity_ordering(banks: &[BankRun], l2: &BankRun) -> Outcome {
    let decreasing = banks.windows(2).all(|w| w[1].active_fraction < w[0].active_fraction);
    let l1_fixed = banks.iter().find(|b| b.alpha == l2.alpha).expect("matching alpha");
    let detail = banks
        .iter()
        .map(|b| format!("alpha {} -> {:.4}", b.alpha, b.active_fraction))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        decreasing && l1_fixed.active_fraction < l2.active_fraction,
        format!(
            "mean active fraction {detail}; at alpha {}: {} {:.4} vs {} {:.4}",
            l2.alpha, l1_fixed.penalty, l1_fixed.active_fraction, l2.penalty, l2.active_fraction
        ),
    )
}

// ---------------------------------------------------------------- 6

fn fewshot(runs: &Runs) -> Outcome {
    let f = &runs.summary.fewshot;
    let sae = f.row(runs.cfg.sae_source()).expect("sae row");
    let raw = f.row(SourceKind::RawQuery).expect("raw row");
    let chance = 1.0 / runs.cfg.corpus.classes as f64;
    let same_split = sae.result.n == raw.result.n;
    outcome(
        sae.result.accuracy > chance && sae.p_value < 0.01 && same_split,
        format!(
            "{} accuracy {:.4} (p {:.1e}, n {}); raw-query {:.4} on the same {} examples; Bayes ceiling {:.4} [{:.4}, {:.4}]",
            sae.kind,
            sae.result.accuracy,
            sae.p_value,
            sae.result.n,
            raw.result.accuracy,
            raw.result.n,
            f.bayes.accuracy,
            f.bayes.lower,
            f.bayes.upper
        ),
    )
}

// ---------------------------------------------------------------- 7

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct PinnedCell {
    target: String,
    steered: usize,
    unsteered: usize,
    uplift: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct PinnedSteering {
    source: String,
    prompts_per_cell: usize,
    improved_targets: usize,
    cells: Vec<PinnedCell>,
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/default-steering.json")
}

fn steering_efficacy(runs: &Runs) -> Outcome {
    let report = steer_report(&runs.a, runs.cfg.sae_source(), Method::Gradient);
    let source = 0;
    let cells: Vec<PinnedCell> = report
        .cells
        .iter()
        .filter(|c| c.source == source)
        .map(|c| PinnedCell {
            target: report.classes[c.target].clone(),
            steered: c.steered[c.target],
            unsteered: c.unsteered[c.target],
            uplift: (c.uplift() * 1e6).round() / 1e6,
        })
        .collect();
    let improved = report.improved_targets(source);
    let observed = PinnedSteering {
        source: report.classes[source].clone(),
        prompts_per_cell: runs.cfg.eval.prompts_per_cell,
        improved_targets: improved,
        cells,
    };
    let path = fixture_path();
    let bless = std::env::var_os("PROTOSTEER_BLESS").is_some() || !path.exists();
    if bless {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&observed).unwrap() + "\n").unwrap();
    }
    let pinned: PinnedSteering = read_json(&path);
    let matches = pinned == observed;
    let per_target = observed
        .cells
        .iter()
        .map(|c| format!("{} {}->{}", c.target, c.unsteered, c.steered))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        improved >= 4 && matches,
        format!(
            "{improved}/{} targets improved from {} ({per_target}, of {} each); fixture {}",
            observed.cells.len(),
            observed.source,
            observed.prompts_per_cell,
            if bless {
                "written"
            } else if matches {
                "matches"
            } else {
                "MISMATCH"
            }
        ),
    )
}

// ---------------------------------------------------------------- 8

fn baseline_contrasts(runs: &Runs) -> Outcome {
    let kind = runs.cfg.sae_source();
    let gradient = steer_report(&runs.a, kind, Method::Gradient);
    let direct = steer_report(&runs.a, kind, Method::DirectAssign);
    let zero_var = direct.cells.iter().all(|c| c.code_variance == Some(0.0));
    let min_grad_var = gradient
        .cells
        .iter()
        .map(|c| c.code_variance.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    // Runs against the second layout, after the determinism comparison.
    let mut off = runs.cfg.clone();
    off.out_dir = runs.b.root().to_path_buf();
    off.steer.eta = 0.0;
    off.steer.max_iters = 0;
    let noop = pipeline::eval_steer(&off, &runs.b, kind, Method::Gradient).unwrap();
    let collapsed = noop.cells.iter().all(|c| c.steered == c.unsteered);
    let shared = noop.cells.iter().zip(&gradient.cells).all(|(a, b)| a.unsteered == b.unsteered);
    outcome(
        zero_var && min_grad_var > 0.0 && collapsed && shared,
        format!(
            "direct-assign variance zero in {}/{} cells; gradient variance min {min_grad_var:.3e}; eta = 0 reproduces the unsteered counts in {}/{} cells",
            direct.cells.iter().filter(|c| c.code_variance == Some(0.0)).count(),
            direct.cells.len(),
            noop.cells.iter().filter(|c| c.steered == c.unsteered).count(),
            noop.cells.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn monotone_ascent(runs: &Runs) -> Outcome {
    let kind = runs.cfg.sae_source();
    let protos = pipeline::load_protos(&runs.cfg, &runs.a, kind).unwrap();
    let lm = pipeline::load_lm(&runs.cfg, &runs.a).unwrap();
    let bank = pipeline::load_bank(&runs.cfg, &runs.a).unwrap();
    let (corpus, _) = pipeline::load_data(&runs.cfg, &runs.a).unwrap();
    let src = CodeSource::new(kind, &lm, Some(&bank), runs.cfg.protos.positions, runs.cfg.corpus.vocab()).unwrap();
    let cfg = SteerConfig {
        eta: 0.01,
        ..runs.cfg.steer.clone()
    };
    let project = cfg.projects(kind);
    let mut rng = seeds::rng(9, "acceptance-ascent");
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let traces = 1000;
    let mut monotone = 0;
    let mut steps = 0usize;
    for _ in 0..traces {
        let i = rng.gen_range(0..corpus.test.len());
        let z = cache
            .entry(i)
            .or_insert_with(|| src.embed_example(&corpus.test[i]).unwrap().iter().map(|&v| v as f64).collect())
            .clone();
        let target = rng.gen_range(0..protos.classes());
        let (_, trace) = steer(&z, &protos, target, &cfg, project).unwrap();
        steps += trace.steps;
        if trace.log_prob.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
    }
    let frac = monotone as f64 / traces as f64;
    outcome(
        frac >= 0.99,
        format!(
            "{monotone}/{traces} traces nondecreasing ({:.1}%), eta 0.01, {:.1} steps per trace on average",
            100.0 * frac,
            steps as f64 / traces as f64
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism(runs: &Runs) -> Outcome {
    let a = pipeline::build_manifest(&runs.a).unwrap();
    let b = pipeline::build_manifest(&runs.b).unwrap();
    // The config echo records the output directory, so it is the one file
    // allowed to differ.
    let strip = |m: &pipeline::Manifest| -> Vec<(String, String)> {
        m.files
            .iter()
            .filter(|f| f.path != "config.toml")
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect()
    };
    let (fa, fb) = (strip(&a), strip(&b));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let reports = fa.iter().filter(|f| f.0.starts_with("reports/")).count();
    let same = fa.len() == fb.len() && differing.is_empty();
    let secs = runs.elapsed_a.as_secs_f64();
    outcome(
        same && secs < 900.0 && reports > 0,
        format!(
            "{} files compared ({reports} reports), {} differ{}; default run took {secs:.0}s",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- driver

const NAMES: [&str; 10] = [
    "gradient suite",
    "steering gradient",
    "intervention identity",
    "SAE training",
    "sparsity ordering",
    "few-shot accuracy",
    "steering efficacy",
    "baseline contrasts",
    "monotone ascent",
    "determinism and runtime",
];

fn main() {
    let requested: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=10).contains(n))
        .collect();
    let wanted = |n: usize| requested.is_empty() || requested.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!(
            "criterion {n:>2} {:<24} {}  {}",
            NAMES[n - 1],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };

    if wanted(1) {
        report(1, gradient_suite());
    }
    if wanted(2) {
        report(2, steering_gradient());
    }
    if (3..=10).any(wanted) {
        let (root, _guard) = run_dirs();
        let runs = pipeline_runs(&root, wanted(8) || wanted(10));
        if wanted(3) {
            report(3, intervention_identity(&runs));
        }
        if wanted(10) {
            report(10, determinism(&runs));
        }
        if wanted(4) || wanted(5) {
            let dump = pipeline::load_dump(&runs.cfg, &runs.a).unwrap();
            let default_alpha = runs.cfg.sae.alpha;
            let mut banks = Vec::new();
            let mut default_run = None;
            let mut matches = false;
            for alpha in [3e-4f32, 3e-3, 3e-2] {
                let (out, run) = train_variant(&runs, &dump, alpha, Penalty::L1);
                if alpha == default_alpha {
                    let on_disk = Checkpoint::read(&runs.a.sae_bank()).unwrap().encode();
                    matches = out.bank.to_checkpoint().encode() == on_disk
                        && bank_sparsity(&out.bank, &dump).unwrap() == out.sparsity;
                    default_run = Some(BankRun { ..run });
                    banks.push(BankRun {
                        alpha: default_run.as_ref().unwrap().alpha,
                        penalty: Penalty::L1,
                        active_fraction: default_run.as_ref().unwrap().active_fraction,
                        secs: default_run.as_ref().unwrap().secs,
                    });
                } else {
                    banks.push(run);
                }
            }
            let default_run = default_run.expect("default alpha is in the sweep");
            if wanted(4) {
                report(4, sae_training(&runs, &default_run, matches));
            }
            if wanted(5) {
                let (_, l2) = train_variant(&runs, &dump, default_alpha, Penalty::L2);
                report(5, sparsity_ordering(&banks, &l2));
            }
        }
        if wanted(6) {
            report(6, fewshot(&runs));
        }
        if wanted(7) {
            report(7, steering_efficacy(&runs));
        }
        if wanted(8) {
            report(8, baseline_contrasts(&runs));
        }
        if wanted(9) {
            report(9, monotone_ascent(&runs));
        }
    }

    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|r| r.1.pass).count();
    let failed: Vec<String> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {passed}/{} criteria passed{}",
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var_os("PROTOSTEER_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
