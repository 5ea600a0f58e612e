// SPDX-License-Identifier: MIT OR Apache-2.0
#![no_main]

use libfuzzer_sys::fuzz_target;
use protosteer::checkpoint::Checkpoint;
use protosteer::microlm::LmWeights;
use protosteer::proto::PrototypeBank;
use protosteer::sae::HeadBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // A decoded checkpoint must re-encode to the same bytes.
        assert_eq!(ck.encode(), data);
        let _ = LmWeights::from_checkpoint(&ck);
        let _ = HeadBank::from_checkpoint(&ck);
        let _ = PrototypeBank::from_checkpoint(&ck);
    }
});
