#![no_main]

use libfuzzer_sys::fuzz_target;
use srctrace::dataio::{decode_embeddings, encode_embeddings};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_embeddings(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode_embeddings(&set).unwrap(), data);
    }
});
