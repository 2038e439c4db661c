#![no_main]
use latedit_core::eval::EvalSetFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(set) = EvalSetFile::parse(s) {
            assert!(!set.pairs.is_empty());
        }
    }
});
