#![no_main]
use latedit_core::EditVector;
use latedit_fuzz::split_framed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((sidecar, bytes)) = split_framed(data) else { return };
    if let Ok(v) = EditVector::from_parts(bytes, sidecar) {
        assert!(v.n_pairs() > 0);
        assert!(v.delta().iter().all(|x| x.is_finite()));
    }
});
