#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::io::RigFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cams) = RigFile::parse(text) {
            for cam in &cams {
                cam.validate().expect("parsed cameras are valid");
            }
        }
    }
});
