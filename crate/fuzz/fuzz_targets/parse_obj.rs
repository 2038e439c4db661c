#![no_main]
use latedit_core::geometry::parse_obj;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = parse_obj(data) {
        cloud.validate().expect("parsed clouds are consistent");
    }
});
