//! Editor training and the test-time optimization baseline.

pub mod dataset;
pub mod manifest;
mod run;
mod step;
mod tto;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{LocalTerms, SdsWeighting};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::schedule::NoiseSchedule;

pub use dataset::{
    build_dataset, reference_instruction_table, ClipFilter, DatasetEntry, EntrySource, InstructionSpec, Origin,
    TrainingDataset,
};
pub use manifest::{DatasetManifest, LoadedPriors, ManifestEntry, PriorSpec, DATASET_MANIFEST};
pub use run::{load_training_state, train, StepRecord, TrainOutputs, TrainSummary};
pub use step::{Priors, PRIOR_NOT_CONFIGURED};
pub use tto::{test_time_optimize, test_time_optimize_all, TtoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Single,
    Multi,
}

/// Geometric decay of the upper end of the timestep range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub start_epoch: usize,
    pub ratio: f64,
    pub every_epochs: usize,
}

impl AnnealConfig {
    pub const SINGLE_PROMPT: Self = Self {
        start_epoch: 100,
        ratio: 0.8,
        every_epochs: 10,
    };
    pub const MULTI_PROMPT: Self = Self {
        start_epoch: 300,
        ratio: 0.8,
        every_epochs: 50,
    };
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self::SINGLE_PROMPT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Photometric warmup length; defaults to 10% of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub anneal: AnnealConfig,
    /// Fractions of the schedule length bounding the sampled timestep.
    pub t_range: [f64; 2],
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub sds_weighting: SdsWeighting,
    pub local_terms: LocalTerms,
    /// Epochs between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every_epochs: usize,
    /// Consecutive non-finite steps tolerated before aborting.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 64,
            epochs: 150,
            max_steps: None,
            warmup_epochs: None,
            anneal: AnnealConfig::SINGLE_PROMPT,
            t_range: [0.02, 0.98],
            seed: 0,
            prompt_mode: PromptMode::Single,
            sds_weighting: SdsWeighting::Unit,
            local_terms: LocalTerms::default(),
            checkpoint_every_epochs: 10,
            divergence_patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn multi_prompt() -> Self {
        Self {
            epochs: 500,
            anneal: AnnealConfig::MULTI_PROMPT,
            prompt_mode: PromptMode::Multi,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0 (got {v})")))
            }
        };
        positive("lr", o.lr)?;
        positive("adam eps", o.eps)?;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.divergence_patience == 0 {
            return Err(Error::Config("batch_size, epochs and divergence_patience must be positive".into()));
        }
        let a = &self.anneal;
        if !(a.ratio > 0.0 && a.ratio < 1.0) || a.every_epochs == 0 {
            return Err(Error::Config("anneal ratio must lie in (0, 1) and every_epochs > 0".into()));
        }
        let [lo, hi] = self.t_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad t_range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.1).round() as usize)
    }
}

/// Upper timestep fraction for `epoch`.
///
/// The result is rounded to twelve decimal places, so repeated decay of a
/// decimal base gives the decimal value (`0.98 * 0.8^2 == 0.6272`). Step
/// ranges round the fraction to an integer step, so this never moves a step.
pub fn anneal_max_timestep(epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.t_range[1];
    let a = &cfg.anneal;
    if epoch < a.start_epoch {
        return base;
    }
    let k = (epoch - a.start_epoch) / a.every_epochs;
    round12(base * a.ratio.powi(k as i32))
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Effective photometric weight: linear ramp from 0 over the warmup, then constant.
pub fn photometric_warmup(epoch: usize, cfg: &TrainConfig, lambda_photo: f64) -> f64 {
    let n = cfg.warmup_len();
    if n == 0 || epoch >= n {
        lambda_photo
    } else {
        lambda_photo * epoch as f64 / n as f64
    }
}

/// Uniform integer step in `[round(lo T), round(hi T)]`, widened so the range is never empty.
pub fn sample_timestep(rng: &mut impl Rng, schedule: &NoiseSchedule, lo_frac: f64, hi_frac: f64) -> usize {
    let (lo, hi) = schedule.step_range(lo_frac, hi_frac);
    rng.random_range(lo..=hi.max(lo))
}
