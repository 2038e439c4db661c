//! Text-to-latent samplers used when a session starts from a prompt.

use std::sync::Arc;

use latedit_core::codec::ToyCodec;
use latedit_core::{Codec, Latent};
use sha2::{Digest, Sha256};

pub trait TextSampler: Send + Sync {
    fn sample(&self, prompt: &str) -> latedit_core::Result<Latent>;
}

/// Deterministic sampler for the toy codec: a unit blob whose colour is
/// derived from a hash of the prompt.
#[derive(Debug, Clone)]
pub struct ToyTextSampler {
    codec: Arc<ToyCodec>,
}

impl ToyTextSampler {
    pub fn new(codec: Arc<ToyCodec>) -> Self {
        Self { codec }
    }
}

impl TextSampler for ToyTextSampler {
    fn sample(&self, prompt: &str) -> latedit_core::Result<Latent> {
        let digest = Sha256::digest(prompt.trim().to_lowercase().as_bytes());
        let color = [0, 1, 2].map(|i| f64::from(digest[i]) / 255.0 - 0.5);
        let latent = self.codec.unit_blob_latent(color)?;
        debug_assert_eq!(latent.codec_id(), self.codec.id());
        Ok(latent)
    }
}
