//! Per-instance baseline: optimize the latent itself under the editing loss.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::step::{sample_gradient, StepSettings};
use super::{Priors, TrainingDataset};
use crate::codec::DifferentiableCodec;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, Latent};
use crate::optim::{AdamW, AdamWConfig, ParamSet};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtoConfig {
    pub steps: usize,
    /// Views averaged per step.
    pub views_per_step: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Class label used to fill a local target description.
    pub class_label: String,
}

impl Default for TtoConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            views_per_step: 4,
            optimizer: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
            class_label: "object".into(),
        }
    }
}

pub fn test_time_optimize(
    r_src: &Latent,
    instruction: &EditInstruction,
    config: &Config,
    codec: &dyn DifferentiableCodec,
    priors: Priors<'_>,
    tto: &TtoConfig,
) -> Result<Latent> {
    config.validate()?;
    r_src.check_shape(codec.latent_shape())?;
    if tto.steps == 0 {
        return Ok(r_src.clone());
    }
    if tto.views_per_step == 0 {
        return Err(Error::Config("views_per_step must be positive".into()));
    }
    priors.check_for(instruction.kind())?;
    let schedule = config.schedule.build()?;
    let mut params = ParamSet::new();
    params.insert("latent", r_src.data().clone());
    let mut opt = AdamW::new(tto.optimizer, &params);
    let mut rng = seeded(tto.seed);
    let settings = StepSettings {
        config,
        schedule: &schedule,
        t_hi: config.train.t_range[1],
        lambda_photo: config.loss.lambda_photo,
        terms: config.train.local_terms,
        weighting: config.train.sds_weighting,
    };
    let mut bad = 0usize;
    for step in 0..tto.steps {
        let current = Latent::new(params.get("latent")?.clone(), r_src.codec_id())?;
        let mut grad = ParamSet::new();
        grad.insert("latent", ndarray::Array2::zeros(current.shape()));
        let mut finite = true;
        for _ in 0..tto.views_per_step {
            let mut r = seeded(rng.next_u64());
            let s = sample_gradient(&settings, &priors, codec, instruction, &tto.class_label, r_src, &current, &mut r)?;
            finite &= s.diagnostics.values().all(|v| v.is_finite()) && s.d_latent.iter().all(|v| v.is_finite());
            grad.get_mut("latent")?
                .scaled_add(1.0 / tto.views_per_step as f64, &s.d_latent);
        }
        if finite {
            bad = 0;
            opt.step(&mut params, &grad)?;
            if !params.all_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: "latent became non-finite".into(),
                    snapshot: None,
                });
            }
        } else {
            bad += 1;
            if bad >= config.train.divergence_patience {
                return Err(Error::Divergence {
                    step,
                    reason: format!("{bad} consecutive non-finite steps"),
                    snapshot: None,
                });
            }
        }
    }
    Latent::new(params.get("latent")?.clone(), r_src.codec_id())
}

/// Runs [`test_time_optimize`] on every valid pair of a dataset.
pub fn test_time_optimize_all(
    data: &TrainingDataset,
    config: &Config,
    codec: &dyn DifferentiableCodec,
    priors: Priors<'_>,
    tto: &TtoConfig,
) -> Result<Vec<(usize, usize, Latent)>> {
    let latents = data.source_latents(codec)?;
    data.pairs()
        .into_iter()
        .map(|(e, i)| {
            let cfg = TtoConfig {
                class_label: data.entries()[e].class_label.clone(),
                ..tto.clone()
            };
            test_time_optimize(&latents[e], &data.instructions()[i], config, codec, priors, &cfg).map(|l| (e, i, l))
        })
        .collect()
}
