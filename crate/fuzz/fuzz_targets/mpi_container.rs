#![no_main]

use libfuzzer_sys::fuzz_target;
use mpiforge::io::{decode_mpi, encode_mpi};

fuzz_target!(|data: &[u8]| {
    if let Ok(mpi) = decode_mpi(data) {
        // anything accepted must re-encode to the same bytes
        let again = encode_mpi(&mpi).expect("decoded MPI re-encodes");
        assert_eq!(decode_mpi(&again).expect("re-decodes").data.data.len(), mpi.data.data.len());
    }
});
