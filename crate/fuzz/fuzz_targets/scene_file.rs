#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::io::SceneFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = serde_json::from_slice::<SceneFile>(data) {
        let _ = file.spec.validate();
    }
});
