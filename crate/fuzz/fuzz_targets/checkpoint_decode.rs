#![no_main]

use libfuzzer_sys::fuzz_target;
use lsaf_core::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoint must encode");
        assert_eq!(bytes, data);
    }
});
