#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let _ = scaledrop::data::parse_idx_labels(data, Path::new("fuzz.idx"));
});
