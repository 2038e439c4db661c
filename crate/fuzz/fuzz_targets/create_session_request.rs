#![no_main]
use latedit_service::CreateSessionRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = CreateSessionRequest::parse(data) {
        let _ = req.into_source("toy-grid5");
    }
});
