// SPDX-License-Identifier: MIT OR Apache-2.0
#![no_main]

use libfuzzer_sys::fuzz_target;
use protosteer::acts::ActivationDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = ActivationDump::decode(data) {
        let _ = ActivationDump::decode(&dump.encode()).expect("re-encoded dump decodes");
    }
});
