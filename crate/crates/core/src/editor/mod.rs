//! The latent editor `g: (r_s, y) -> r_e`.

pub mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{EditInstruction, Latent};
use crate::schedule::{NoiseSchedule, SHAP_E_EDITOR_TAU};

pub use toy::{CheckpointManifest, ToyDenoiser, ToyEditor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorInit {
    /// Copy the base denoiser and zero the weights on the added channels.
    #[default]
    Pretrained,
    /// Ablation: everything random.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    /// Fixed noise step of the stacked input.
    pub tau: usize,
    /// Seed of the noise injected at inference; fixed per deployment.
    pub inference_seed: u64,
    pub d_model: usize,
    pub hidden: usize,
    pub init: EditorInit,
    pub init_seed: u64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            tau: SHAP_E_EDITOR_TAU,
            inference_seed: 0x5eed,
            d_model: 16,
            hidden: 32,
            init: EditorInit::Pretrained,
            init_seed: 1,
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden == 0 {
            return Err(Error::Config("editor widths must be positive".into()));
        }
        Ok(())
    }
}

/// `(alpha_tau r_s + sigma_tau eps, r_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput {
    pub noised: Array2<f64>,
    pub clean: Array2<f64>,
}

impl StackedInput {
    /// Channel-wise concatenation, `D x 2C`.
    pub fn concat(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[self.noised.view(), self.clean.view()])
            .expect("halves share a shape")
    }
}

pub fn stack_input(r_src: &Latent, eps: &Array2<f64>, schedule: &NoiseSchedule, tau: usize) -> Result<StackedInput> {
    if eps.dim() != r_src.shape() {
        return Err(Error::shape(r_src.shape(), eps.dim()));
    }
    Ok(StackedInput {
        noised: schedule.noise(r_src.data(), tau, eps)?,
        clean: r_src.data().clone(),
    })
}

/// Feed-forward inference interface shared by the service and the evaluation harness.
pub trait LatentEditor: Send + Sync {
    fn architecture(&self) -> &str;
    fn codec_id(&self) -> &str;
    fn latent_shape(&self) -> (usize, usize);
    fn instructions(&self) -> &[EditInstruction];

    /// One forward pass with the deployment noise.
    fn edit(&self, r_src: &Latent, instruction: &str) -> Result<Latent>;

    /// Number of inference forward passes so far.
    fn forward_count(&self) -> usize;

    /// Content hash of the loaded weights.
    fn weights_hash(&self) -> String;

    fn instruction(&self, text: &str) -> Option<&EditInstruction> {
        self.instructions().iter().find(|i| i.text() == text)
    }
}
