#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::io::{decode_tensors, decode_weights, encode_tensors};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode_tensors(data) {
        let borrowed: Vec<_> = tensors.iter().map(|(n, s, v)| (n.clone(), s.clone(), v.as_slice())).collect();
        let again = encode_tensors(&borrowed).expect("decoded tensors re-encode");
        assert_eq!(decode_tensors(&again).expect("re-decodes"), tensors);
    }
    let _ = decode_weights(data);
});
