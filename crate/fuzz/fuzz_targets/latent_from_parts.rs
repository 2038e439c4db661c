#![no_main]
use latedit_core::container::{latent_from_parts, latent_to_parts};
use latedit_fuzz::split_framed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((sidecar, bytes)) = split_framed(data) else { return };
    if let Ok(latent) = latent_from_parts(bytes, sidecar) {
        assert!(latent.data().iter().all(|v| v.is_finite()));
        let (b, s) = latent_to_parts(&latent).expect("accepted latent serializes");
        assert_eq!(latent_from_parts(&b, &s).expect("re-read"), latent);
    }
});
