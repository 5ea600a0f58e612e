// SPDX-License-Identifier: MIT OR Apache-2.0
#![no_main]

use libfuzzer_sys::fuzz_target;
use protosteer::stylegen::{parse_example, CorpusConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let cfg = CorpusConfig::default();
    if let Ok(ex) = parse_example(line, cfg.vocab(), cfg.classes) {
        assert!(ex.label < cfg.classes);
        assert!(!ex.response.is_empty());
    }
});
