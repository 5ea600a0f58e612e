// SPDX-License-Identifier: MIT OR Apache-2.0
#![no_main]

use libfuzzer_sys::fuzz_target;
use protosteer::config::ExperimentConfig;

// The document, then optional override lines after a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (doc, rest) = text.split_once('\0').unwrap_or((text, ""));
    let overrides: Vec<String> = rest.lines().map(str::to_string).collect();
    if let Ok(cfg) = ExperimentConfig::from_toml_with(doc, &overrides) {
        let again = ExperimentConfig::from_toml_with(&cfg.to_toml(), &[]).expect("echoed config parses");
        assert_eq!(again, cfg);
    }
});
