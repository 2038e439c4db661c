//! Image-text and structure metrics, plus the multi-view evaluation harness.

pub mod harness;
pub mod metrics;
pub mod plugin;
pub mod report;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use harness::{evaluate, EvalContext, EvalPair, EvalSetEntry, EvalSetFile, InstructionRef};
pub use metrics::{clip_dir, clip_sim, structure_distance, Backbone, Embedder};
pub use plugin::{PluginBackbone, PluginEmbedder};
pub use report::{Aggregate, EvalReport, PairResult};
pub use toy::{ToyBackbone, ToyEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Equally spaced azimuths per object.
    pub views: usize,
    /// Side length every render is resized to before embedding.
    pub resolution: usize,
    /// Frames in a service turntable.
    pub turntable_frames: usize,
    /// Image-text embedding model requested from the embedder adapter.
    pub embedder_model: String,
    /// Self-supervised backbone whose key self-similarity gives structure descriptors.
    pub backbone_model: String,
    pub backbone_layer: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 20,
            resolution: 256,
            turntable_frames: 12,
            embedder_model: "clip-vit-large-patch14".into(),
            backbone_model: "dino-vitb8".into(),
            backbone_layer: 11,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.resolution == 0 || self.turntable_frames == 0 {
            return Err(Error::Config("eval views, resolution and turntable_frames must be positive".into()));
        }
        Ok(())
    }
}
