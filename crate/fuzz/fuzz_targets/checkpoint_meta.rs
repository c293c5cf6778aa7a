#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::training::CheckpointMeta;

fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = serde_json::from_slice::<CheckpointMeta>(data) {
        let _ = meta.config.validate();
        let _ = meta.rng.restore();
    }
});
