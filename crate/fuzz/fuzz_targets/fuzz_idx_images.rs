#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

// The IDX image parser must reject malformed headers and truncated
// payloads with an error (never panic, never over-allocate).
fuzz_target!(|data: &[u8]| {
    let _ = scaledrop::data::parse_idx_images(data, Path::new("fuzz.idx"));
});
