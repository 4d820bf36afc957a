#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

// Checkpoint loading is fully bounds-checked: arbitrary bytes must either
// load into a consistent model or fail with a malformed-file error.
fuzz_target!(|data: &[u8]| {
    if let Ok((model, dropout, header)) =
        scaledrop::checkpoint::load_checkpoint_bytes(data, Path::new("fuzz.sdcp"))
    {
        // Anything that loads must round-trip.
        let again = scaledrop::checkpoint::checkpoint_bytes(
            &model,
            &dropout,
            header.history_digest.clone(),
            header.has_proxy,
        )
        .expect("loaded checkpoints reserialize");
        let (model2, _, _) =
            scaledrop::checkpoint::load_checkpoint_bytes(&again, Path::new("fuzz2.sdcp"))
                .expect("reserialized checkpoints load");
        assert_eq!(model.layers.len(), model2.layers.len());
    }
});
