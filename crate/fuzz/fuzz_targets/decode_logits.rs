#![no_main]

use libfuzzer_sys::fuzz_target;
use srctrace::dataio::{decode_logits, encode_logits};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_logits(data) {
        assert_eq!(encode_logits(&set).unwrap(), data);
    }
});
