//! The training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::step::{sample_gradient, SampleGradient, StepSettings};
use super::{anneal_max_timestep, photometric_warmup, Priors, TrainingDataset};
use crate::codec::DifferentiableCodec;
use crate::config::Config;
use crate::container::{read_tensors, take_2d, write_atomic, write_tensors};
use crate::editor::ToyEditor;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::optim::{AdamW, ParamSet};
use crate::rng::{gaussian2, seeded};

const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const STATE_FILE: &str = "train_state.json";

/// Per-step diagnostics, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub t_max: f64,
    pub lambda_photo: f64,
    pub timesteps: Vec<usize>,
    /// Batch means of each loss term.
    pub terms: BTreeMap<String, f64>,
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<StepRecord>,
}

/// Where training writes checkpoints and metrics.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub out_dir: Option<&'a Path>,
    pub metrics: Option<&'a mut (dyn Write + Send)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    optimizer_steps: u64,
}

fn save_state(dir: &Path, opt: &AdamW, step: usize) -> Result<()> {
    let (m, v) = opt.moments();
    let mut t = BTreeMap::new();
    for (prefix, set) in [("m", m), ("v", v)] {
        for (k, a) in set.iter() {
            t.insert(format!("{prefix}/{k}"), a.clone().into_dyn());
        }
    }
    write_tensors(&dir.join(OPTIMIZER_FILE), &t)?;
    let state = TrainState {
        step,
        optimizer_steps: opt.steps_taken(),
    };
    write_atomic(&dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?.as_bytes())
}

/// Optimizer state and next step saved alongside a checkpoint, if present.
pub fn load_training_state(dir: &Path, editor: &ToyEditor, cfg: &Config) -> Result<Option<(AdamW, usize)>> {
    let state_path = dir.join(STATE_FILE);
    if !state_path.exists() {
        return Ok(None);
    }
    let state: TrainState = serde_json::from_str(&std::fs::read_to_string(state_path)?)?;
    let mut tensors = read_tensors(&dir.join(OPTIMIZER_FILE))?;
    let mut m = ParamSet::new();
    let mut v = ParamSet::new();
    for name in editor.params().names() {
        m.insert(name.clone(), take_2d(&mut tensors, &format!("m/{name}"))?);
        v.insert(name.clone(), take_2d(&mut tensors, &format!("v/{name}"))?);
    }
    if !m.same_layout(editor.params()) {
        return Err(Error::Format("optimizer state does not match the editor".into()));
    }
    let opt = AdamW::from_state(cfg.train.optimizer, state.optimizer_steps, m, v)?;
    Ok(Some((opt, state.step)))
}

struct Element {
    grads: ParamSet,
    sample: Option<SampleGradient>,
}

/// Trains `editor` in place.
///
/// `resume` continues from saved optimizer state and step counter.
pub fn train(
    config: &Config,
    data: &TrainingDataset,
    editor: &mut ToyEditor,
    codec: &dyn DifferentiableCodec,
    priors: Priors<'_>,
    mut outputs: TrainOutputs<'_>,
    resume: Option<(AdamW, usize)>,
) -> Result<TrainSummary> {
    config.validate()?;
    let tc = &config.train;
    let schedule = config.schedule.build()?;
    let pairs = data.pairs();
    let mut pair_instr = Vec::with_capacity(pairs.len());
    for &(_, ii) in &pairs {
        let y = &data.instructions()[ii];
        priors.check_for(y.kind())?;
        pair_instr.push(editor.instruction_index(y.text())?);
    }
    let latents = data.source_latents(codec)?;
    let shape = editor.latent_shape_checked(codec.latent_shape())?;
    let steps_per_epoch = pairs.len().div_ceil(tc.batch_size);
    let total = tc.max_steps.unwrap_or(tc.epochs * steps_per_epoch);
    let (mut opt, start) = match resume {
        Some((o, s)) => (o, s),
        None => (AdamW::new(tc.optimizer, editor.params()), 0),
    };
    let mut rng = seeded(tc.seed);
    // Advance the stream so a resumed run draws the same samples as an uninterrupted one.
    for _ in 0..start * tc.batch_size {
        rng.next_u64();
    }
    let parallel = priors.all_concurrent();
    let mut bad_streak = 0usize;
    let mut summary = TrainSummary {
        steps: 0,
        epochs: 0,
        checkpoints: Vec::new(),
        history: Vec::new(),
    };
    let hash = config.hash();

    for step in start..total {
        let epoch = step / steps_per_epoch;
        let settings = StepSettings {
            config,
            schedule: &schedule,
            t_hi: anneal_max_timestep(epoch, tc),
            lambda_photo: photometric_warmup(epoch, tc, config.loss.lambda_photo),
            terms: tc.local_terms,
            weighting: tc.sds_weighting,
        };
        let seeds: Vec<u64> = (0..tc.batch_size).map(|_| rng.next_u64()).collect();
        let ed: &ToyEditor = editor;
        let run = |seed: &u64| -> Result<Element> {
            let mut r = seeded(*seed);
            let p = r.random_range(0..pairs.len());
            let (ei, ii) = pairs[p];
            let r_s = &latents[ei];
            let eps = gaussian2(&mut r, shape.0, shape.1);
            let x = ed.stacked(r_s, &eps)?;
            let (out, cache) = ed.forward(&x, pair_instr[p])?;
            if !out.iter().all(|v| v.is_finite()) {
                return Ok(Element {
                    grads: ed.params().zeros_like(),
                    sample: None,
                });
            }
            let r_e = Latent::new(out, r_s.codec_id())?;
            let y = &data.instructions()[ii];
            let class = &data.entries()[ei].class_label;
            let sample = sample_gradient(&settings, &priors, codec, y, class, r_s, &r_e, &mut r)?;
            let grads = ed.backward(&sample.d_latent, &cache)?;
            Ok(Element {
                grads,
                sample: Some(sample),
            })
        };
        let elements: Vec<Element> = if parallel {
            seeds.par_iter().map(run).collect::<Result<_>>()?
        } else {
            seeds.iter().map(run).collect::<Result<_>>()?
        };

        let mut grads = editor.params().zeros_like();
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut timesteps = Vec::with_capacity(elements.len());
        let mut finite = true;
        let b = elements.len() as f64;
        for e in &elements {
            match &e.sample {
                Some(s) => {
                    timesteps.push(s.t);
                    for (k, v) in &s.diagnostics {
                        *terms.entry(k.clone()).or_insert(0.0) += v / b;
                    }
                }
                None => finite = false,
            }
            grads.add_scaled(&e.grads, 1.0 / b)?;
        }
        finite &= terms.values().all(|v| v.is_finite()) && grads.all_finite();
        let record = StepRecord {
            step,
            epoch,
            t_max: settings.t_hi,
            lambda_photo: settings.lambda_photo,
            timesteps,
            terms,
            finite,
        };
        if let Some(w) = outputs.metrics.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        summary.history.push(record);

        if finite {
            bad_streak = 0;
            opt.step(editor.params_mut(), &grads)?;
        } else {
            bad_streak += 1;
            tracing::warn!(step, bad_streak, "non-finite loss or gradient; update skipped");
            if bad_streak >= tc.divergence_patience {
                let snapshot = match outputs.out_dir {
                    Some(dir) => {
                        let p = dir.join(format!("divergence-step-{step:07}"));
                        editor.save(&p, Some(hash.clone()), Some(epoch))?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(Error::Divergence {
                    step,
                    reason: format!("{bad_streak} consecutive non-finite steps"),
                    snapshot,
                });
            }
        }
        summary.steps = step + 1;

        let epoch_done = (step + 1) % steps_per_epoch == 0;
        if epoch_done {
            summary.epochs = (step + 1) / steps_per_epoch;
            if let Some(dir) = outputs.out_dir.filter(|_| tc.checkpoint_every_epochs > 0) {
                if summary.epochs % tc.checkpoint_every_epochs == 0 {
                    let p = dir.join(format!("epoch-{:04}", summary.epochs));
                    editor.save(&p, Some(hash.clone()), Some(summary.epochs))?;
                    save_state(&p, &opt, step + 1)?;
                    summary.checkpoints.push(p);
                }
            }
        }
    }
    if let Some(dir) = outputs.out_dir {
        let p = dir.join("final");
        editor.save(&p, Some(hash), Some(summary.epochs))?;
        save_state(&p, &opt, summary.steps)?;
        summary.checkpoints.push(p);
    }
    if let Some(w) = outputs.metrics.as_deref_mut() {
        w.flush()?;
    }
    Ok(summary)
}

impl ToyEditor {
    pub(crate) fn latent_shape_checked(&self, codec_shape: (usize, usize)) -> Result<(usize, usize)> {
        use crate::editor::LatentEditor;
        if self.latent_shape() != codec_shape {
            return Err(Error::shape(codec_shape, self.latent_shape()));
        }
        Ok(codec_shape)
    }
}

