#![no_main]

use libfuzzer_sys::fuzz_target;
use lsaf_core::data::{RasterFile, RasterHeader};

fuzz_target!(|data: &[u8]| {
    let _ = RasterHeader::decode(data);
    if let Ok(file) = RasterFile::decode(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(file.encode(), data);
        let _ = file.to_tensor();
        let _ = file.to_labels();
    }
});
