// SPDX-License-Identifier: MIT OR Apache-2.0

//! `protosteer`: run any pipeline stage against an output directory.
//!
//! Every subcommand takes `--config FILE`, `--seed`, `--jobs`, `--out` and
//! trailing `key.path=value` overrides. Failures print a single line
//! `error kind=<kind> stage=<stage> path="<path>" message="<message>"` to
//! stderr (quoted fields are JSON strings) and exit with status 1.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protosteer::config::{ExperimentConfig, SweepAxis};
use protosteer::pipeline::{self, Layout};
use protosteer::proto::SourceKind;
use protosteer::steering::Method;
use protosteer::stylegen;
use protosteer::Error;

#[derive(Parser, Debug)]
#[command(name = "protosteer", version, about = "Prototype-guided steering of SAE query codes in a small language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; omitted keys take their defaults, unknown keys are
    /// rejected. `default` means the built-in defaults. [default: built-in]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed, also used as the corpus seed. [default: config `seed`, 17]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for SAE heads and per-prompt jobs. [default: config `jobs`, 1]
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,

    /// Output directory. [default: config `out_dir`, runs/default]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Config overrides such as `sae.alpha=3e-2` or `eval.sources=[0,1]`,
    /// applied after the config file. [default: none]
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CodeKind {
    /// SAE codes at the configured hook site
    Sae,
    /// Raw query vectors, no SAE
    Raw,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Recode,
    Online,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodArg {
    Gradient,
    DirectAssign,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AxisArg {
    Layer,
    Alpha,
    Latent,
    Penalty,
    Site,
    All,
}

#[derive(Args, Debug, Clone)]
struct SteerArgs {
    /// Code source to steer in
    #[arg(long, value_enum, default_value_t = CodeKind::Sae)]
    source_kind: CodeKind,

    /// Steering method
    #[arg(long, value_enum, default_value_t = MethodArg::Gradient)]
    method: MethodArg,

    /// Steering mode. [default: config `eval.mode`, recode]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the styled corpus splits and class specs
    GenData(Common),
    /// Train the language model on the training split
    TrainLm(Common),
    /// Capture hook-site activations over the training split
    DumpActs(Common),
    /// Train one SAE per head on the activation dump
    TrainSae(Common),
    /// Build class prototypes for the SAE and raw-query code sources
    BuildProtos(Common),
    /// Nearest-prototype classification of the test split
    EvalFewshot(Common),
    /// Steer evaluation prompts toward one class and write the tokens
    Steer {
        #[command(flatten)]
        common: Common,
        /// Target class, by name or index
        #[arg(long, value_name = "CLASS")]
        target: String,
        #[command(flatten)]
        steer: SteerArgs,
    },
    /// Judge-distribution report over every (source, target) cell
    EvalSteer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        steer: SteerArgs,
    },
    /// Re-run SAE training and evaluation across one sweep axis
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis to sweep; `all` runs every axis in turn
        #[arg(long, value_enum, default_value_t = AxisArg::All)]
        axis: AxisArg,
    },
    /// Compare SAE steering with raw-query steering and direct assignment
    Baselines(Common),
    /// Every stage in order, then the summary and manifest
    RunAll(Common),
}

fn load_config(common: &Common, mode: Option<ModeArg>) -> Result<ExperimentConfig, Error> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
        overrides.push(format!("corpus.seed={s}"));
    }
    if let Some(j) = common.jobs {
        overrides.push(format!("jobs={j}"));
    }
    if let Some(m) = mode {
        let m = match m {
            ModeArg::Recode => "recode",
            ModeArg::Online => "online",
        };
        overrides.push(format!("eval.mode=\"{m}\""));
    }
    overrides.extend(common.overrides.iter().cloned());
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={}", toml_string(&out.to_string_lossy())));
    }
    let path = common.config.as_deref().filter(|p| !(p.as_os_str() == "default" && !p.exists()));
    ExperimentConfig::load(path, &overrides)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn source_kind(cfg: &ExperimentConfig, k: CodeKind) -> SourceKind {
    match k {
        CodeKind::Sae => cfg.sae_source(),
        CodeKind::Raw => SourceKind::RawQuery,
    }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Gradient => Method::Gradient,
        MethodArg::DirectAssign => Method::DirectAssign,
    }
}

fn resolve_target(layout: &Layout, key: &str) -> Result<usize, Error> {
    let path = layout.specs();
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let specs = stylegen::read_specs(&path)?;
    stylegen::class_index(&specs, key).ok_or_else(|| Error::Config(format!("unknown target class `{key}`")))
}

fn run(cmd: Command) -> Result<(), Error> {
    let started = Instant::now();
    match cmd {
        Command::GenData(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let (corpus, _) = pipeline::gen_data(&cfg, &layout)?;
            println!(
                "wrote {} train, {} valid, {} test examples under {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                layout.root().join("data").display()
            );
        }
        Command::TrainLm(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let (_, r) = pipeline::train_lm(&cfg, &layout)?;
            println!(
                "valid loss {:.4} -> {:.4} after {} steps; wrote {}",
                r.initial_valid_loss,
                r.final_valid_loss,
                r.steps,
                layout.lm().display()
            );
        }
        Command::DumpActs(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let d = pipeline::dump_acts(&cfg, &layout)?;
            println!(
                "captured {} records at layer {} ({}); wrote {}",
                d.records.len(),
                d.layer,
                d.site,
                layout.acts().display()
            );
        }
        Command::TrainSae(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let out = pipeline::train_sae(&cfg, &layout)?;
            let ratios: Vec<String> = out.loss_ratios().iter().map(|r| format!("{r:.4}")).collect();
            println!(
                "held-out loss ratio per head [{}]; active fraction {:.4}; wrote {}",
                ratios.join(", "),
                out.sparsity.active_fraction,
                layout.sae_bank().display()
            );
        }
        Command::BuildProtos(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            for pb in pipeline::build_protos(&cfg, &layout)? {
                println!("{}: {} classes x {} wide", pb.source.kind, pb.classes(), pb.width());
            }
        }
        Command::EvalFewshot(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let r = pipeline::eval_fewshot(&cfg, &layout)?;
            for row in &r.rows {
                println!(
                    "{}: accuracy {:.4} (chance {:.4}, p {:.3e}, judge ceiling {:.4})",
                    row.kind, row.result.accuracy, row.chance, row.p_value, r.bayes.accuracy
                );
            }
        }
        Command::Steer { common, target, steer } => {
            let cfg = load_config(&common, steer.mode)?;
            let layout = Layout::new(&cfg.out_dir);
            let t = resolve_target(&layout, &target).map_err(|e| stage_err("steer", e))?;
            let path = pipeline::steer(&cfg, &layout, t, source_kind(&cfg, steer.source_kind), method(steer.method))?;
            println!("wrote {}", path.display());
        }
        Command::EvalSteer { common, steer } => {
            let cfg = load_config(&common, steer.mode)?;
            let layout = Layout::new(&cfg.out_dir);
            let r = pipeline::eval_steer(&cfg, &layout, source_kind(&cfg, steer.source_kind), method(steer.method))?;
            print_steer(&r);
        }
        Command::Sweep { common, axis } => {
            let cfg = load_config(&common, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let axes = match axis {
                AxisArg::Layer => vec![SweepAxis::Layer],
                AxisArg::Alpha => vec![SweepAxis::Alpha],
                AxisArg::Latent => vec![SweepAxis::Latent],
                AxisArg::Penalty => vec![SweepAxis::Penalty],
                AxisArg::Site => vec![SweepAxis::Site],
                AxisArg::All => vec![SweepAxis::Layer, SweepAxis::Alpha, SweepAxis::Latent, SweepAxis::Penalty, SweepAxis::Site],
            };
            for a in axes {
                for row in pipeline::sweep(&cfg, &layout, a)? {
                    match &row.outcome {
                        Ok(m) => println!(
                            "{}={}: fewshot {:.4}, active {:.4}, target fraction {:.3} (unsteered {:.3})",
                            a, row.value, m.fewshot_accuracy, m.sparsity.active_fraction, m.mean_target_fraction, m.mean_unsteered_fraction
                        ),
                        Err(e) => println!("{}={}: failed: {e}", a, row.value),
                    }
                }
            }
        }
        Command::Baselines(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let cmp = pipeline::baselines(&cfg, &layout, None)?;
            for m in &cmp.methods {
                println!(
                    "#{} {}: target fraction {:.3} (unsteered {:.3}), improved {}/{}",
                    m.rank, m.label, m.mean_target_fraction, m.mean_unsteered_fraction, m.improved_targets, m.cells
                );
            }
        }
        Command::RunAll(c) => {
            let cfg = load_config(&c, None)?;
            let layout = Layout::new(&cfg.out_dir);
            let s = pipeline::run_all(&cfg, &layout)?;
            for row in &s.fewshot.rows {
                println!("fewshot {}: {:.4} (p {:.3e})", row.kind, row.result.accuracy, row.p_value);
            }
            for (src, k) in &s.improved_targets {
                println!("source {src}: {k} targets improved");
            }
            for m in &s.methods {
                println!("#{} {}: target fraction {:.3}", m.rank, m.label, m.mean_target_fraction);
            }
            println!("wrote {}", layout.manifest().display());
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn stage_err(stage: &'static str, e: Error) -> Error {
    Error::Stage {
        stage,
        source: Box::new(e),
    }
}

fn print_steer(r: &pipeline::SteerReport) {
    for c in &r.cells {
        println!(
            "{} -> {}: {:.3} (unsteered {:.3}), {:.1} iterations",
            r.classes[c.source],
            r.classes[c.target],
            c.target_fraction(),
            c.unsteered_fraction(),
            c.mean_iterations
        );
    }
}

/// The single stderr line for a failed run.
fn error_line(e: &Error) -> String {
    let path = match e.root() {
        Error::MissingArtifact(p) => p.display().to_string(),
        Error::Io { path, .. } => path.display().to_string(),
        _ => "-".to_string(),
    };
    let message = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!(
        "error kind={} stage={} path={} message={}",
        e.kind(),
        e.stage().unwrap_or("-"),
        toml_string(&path),
        toml_string(&message)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
