// SPDX-License-Identifier: MIT OR Apache-2.0

//! Replays the checked-in fuzz seed corpora through the fuzz-target checks, so
//! the seeds stay valid on stable toolchains.

use std::path::{Path, PathBuf};

use protosteer::acts::ActivationDump;
use protosteer::checkpoint::Checkpoint;
use protosteer::config::ExperimentConfig;
use protosteer::microlm::LmWeights;
use protosteer::proto::PrototypeBank;
use protosteer::sae::HeadBank;
use protosteer::stylegen::{parse_example, parse_specs, CorpusConfig};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_decode_into_their_kind() {
    for (path, bytes) in seeds("checkpoint") {
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.encode(), bytes, "{}", path.display());
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let ok = if name.starts_with("lm") {
            LmWeights::from_checkpoint(&ck).is_ok()
        } else if name.starts_with("sae") {
            HeadBank::from_checkpoint(&ck).is_ok()
        } else {
            PrototypeBank::from_checkpoint(&ck).is_ok()
        };
        assert!(ok, "{name}");
    }
}

#[test]
fn acts_seeds_round_trip() {
    for (_, bytes) in seeds("acts") {
        let dump = ActivationDump::decode(&bytes).unwrap();
        assert_eq!(dump.encode(), bytes);
    }
}

#[test]
fn corpus_line_seeds_parse_as_labelled() {
    let cfg = CorpusConfig::default();
    for (path, bytes) in seeds("corpus_line") {
        let line = std::str::from_utf8(&bytes).unwrap();
        let parsed = parse_example(line.trim_end(), cfg.vocab(), cfg.classes);
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        assert_eq!(parsed.is_ok(), name != "oov", "{name}");
    }
}

#[test]
fn specs_seeds_parse() {
    for (_, bytes) in seeds("specs") {
        assert_eq!(parse_specs(&bytes).unwrap().len(), 6);
    }
}

#[test]
fn config_seeds_parse_and_echo() {
    for (path, bytes) in seeds("config") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let (doc, rest) = text.split_once('\0').unwrap_or((text, ""));
        let overrides: Vec<String> = rest.lines().map(str::to_string).collect();
        let cfg = ExperimentConfig::from_toml_with(doc, &overrides).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::from_toml_with(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
