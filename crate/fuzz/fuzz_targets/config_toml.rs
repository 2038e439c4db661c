#![no_main]
use latedit_core::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_toml_str(s) {
        let text = cfg.to_toml_string().expect("valid config serializes");
        assert_eq!(Config::from_toml_str(&text).expect("re-parse"), cfg);
    }
});
