#![no_main]

use libfuzzer_sys::fuzz_target;
use srctrace::ood::NsdModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = NsdModel::decode(data) {
        assert_eq!(model.encode().unwrap(), data);
    }
});
