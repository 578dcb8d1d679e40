#![no_main]

use libfuzzer_sys::fuzz_target;
use srctrace::dataio::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
        }
    }
});
