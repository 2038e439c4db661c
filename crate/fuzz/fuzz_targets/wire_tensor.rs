#![no_main]
use latedit_core::plugin::WireTensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(t) = serde_json::from_slice::<WireTensor>(data) else { return };
    if let Ok(a) = t.decode() {
        let back = WireTensor::encode(&a).decode().expect("re-decode");
        assert_eq!(a.shape(), back.shape());
        assert!(a.iter().zip(back.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
});
