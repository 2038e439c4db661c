#![no_main]
use latedit_core::container::{tensors_from_bytes, tensors_to_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = tensors_from_bytes(data) {
        // Anything accepted must survive a write and re-read unchanged.
        let bytes = tensors_to_bytes(&tensors).expect("accepted tensors serialize");
        let again = tensors_from_bytes(&bytes).expect("re-read");
        assert_eq!(tensors.len(), again.len());
        for (k, v) in &tensors {
            let w = &again[k];
            assert_eq!(v.shape(), w.shape());
            assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
});
