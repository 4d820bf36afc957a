#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let _ = scaledrop::data::parse_csv_vectors(data, Path::new("fuzz.csv"));
});
