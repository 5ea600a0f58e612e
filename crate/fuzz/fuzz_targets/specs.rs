// SPDX-License-Identifier: MIT OR Apache-2.0
#![no_main]

use libfuzzer_sys::fuzz_target;
use protosteer::stylegen::parse_specs;

fuzz_target!(|data: &[u8]| {
    let _ = parse_specs(data);
});
