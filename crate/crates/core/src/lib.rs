//! Feed-forward, instruction-driven editing of 3D asset latents.
//!
//! A latent editor `g` maps a source latent and an edit instruction to an
//! edited latent in one forward pass. It is trained by distilling 2D
//! diffusion priors through a differentiable renderer, so the full edit
//! pipeline is `decode . g . encode`.
//!
//! Every learning component has an analytic toy counterpart (codec, priors,
//! editor) so training and evaluation run on a CPU in seconds. Pretrained
//! models plug in through line-delimited JSON adapter processes.

pub mod codec;
pub mod config;
pub mod container;
pub mod distill;
pub mod editor;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod latent;
pub mod latent_ops;
pub mod optim;
pub mod plugin;
pub mod prior;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toy_task;
pub mod trainer;

pub use codec::{AssetSource, Codec, DifferentiableCodec, PointCloud, RenderedView, Viewpoint};
pub use config::Config;
pub use editor::{LatentEditor, ToyEditor};
pub use error::{Error, Result};
pub use latent::{EditInstruction, EditKind, Latent};
pub use latent_ops::{apply_edit_vector, extract_edit_vector, scale_edit, sequential_edit, EditVector};
pub use prior::{Prior, PriorKind};
pub use schedule::NoiseSchedule;
