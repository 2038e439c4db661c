#![no_main]
use latedit_core::plugin::{parse_response, WireTensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(r) = parse_response(line) {
        assert!(r.result.is_some() != r.error.is_some());
        if let Some(v) = r.result {
            if let Ok(t) = serde_json::from_value::<WireTensor>(v) {
                let _ = t.decode();
            }
        }
    }
});
