//! The synthetic "+c shift" editing task.
//!
//! Source latents are random toy-codec grids. The instruction asks for a
//! fixed offset `c` on the colour channels of the centre cell; the toy
//! prior's conditional mean is exactly the render of `r + c`, so a perfect
//! editor maps every latent `r` to `r + c`. This gives training, test-time
//! optimisation and latent arithmetic a closed-form target.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, ToyCodec, ToyCodecConfig};
use crate::config::{Config, GuidanceConfig};
use crate::editor::{LatentEditor, ToyEditor};
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, Latent};
use crate::optim::AdamWConfig;
use crate::prior::{GaussianPrior, ShiftTaskPrior};
use crate::rng::seeded;
use crate::container::{save_latent, write_atomic};
use crate::eval::{EvalSetEntry, EvalSetFile, InstructionRef};
use crate::trainer::{
    build_dataset, DatasetEntry, DatasetManifest, EntrySource, InstructionSpec, ManifestEntry, Origin, PriorSpec,
    TrainingDataset, DATASET_MANIFEST,
};
use crate::distill::SdsWeighting;

pub const SHIFT_INSTRUCTION: &str = "make the centre magenta";
pub const SHIFT_CLASS: &str = "blob";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftTaskConfig {
    pub codec: ToyCodecConfig,
    /// Offset added to the centre cell's colour channels (logit units).
    pub shift: [f64; 3],
    pub train_latents: usize,
    pub held_out_latents: usize,
    pub seed: u64,
    /// Densities are drawn uniformly from this range; colours from `N(0, color_std^2)`.
    pub density_range: [f64; 2],
    pub color_std: f64,
}

impl Default for ShiftTaskConfig {
    fn default() -> Self {
        Self {
            codec: ToyCodecConfig::default(),
            shift: [1.0, -0.6, 0.4],
            train_latents: 64,
            held_out_latents: 8,
            seed: 1,
            density_range: [1.0, 2.0],
            color_std: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShiftTask {
    pub config: ShiftTaskConfig,
    pub codec: ToyCodec,
    pub train: Vec<Latent>,
    pub held_out: Vec<Latent>,
    shift_latent: Array2<f64>,
}

impl ShiftTask {
    pub fn new(config: ShiftTaskConfig) -> Result<Self> {
        let codec = ToyCodec::new(config.codec)?;
        let centre = codec
            .center_cell()
            .ok_or_else(|| Error::Config("the shift task needs an odd toy grid with a centre cell".into()))?;
        let [lo, hi] = config.density_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && config.color_std.is_finite() && config.color_std >= 0.0) {
            return Err(Error::Config("bad shift task sampling ranges".into()));
        }
        let mut rng = seeded(config.seed);
        let mut sample = |n: usize| -> Result<Vec<Latent>> {
            (0..n).map(|_| random_latent(&codec, &mut rng, [lo, hi], config.color_std)).collect()
        };
        let train = sample(config.train_latents)?;
        let held_out = sample(config.held_out_latents)?;
        let mut shift_latent = Array2::zeros(codec.latent_shape());
        for k in 0..3 {
            shift_latent[[centre, k + 1]] = config.shift[k];
        }
        Ok(Self {
            config,
            codec,
            train,
            held_out,
            shift_latent,
        })
    }

    pub fn instruction() -> EditInstruction {
        EditInstruction::global(SHIFT_INSTRUCTION).expect("non-empty")
    }

    /// The ideal edit residual `c` as a full latent-shaped array.
    pub fn shift(&self) -> &Array2<f64> {
        &self.shift_latent
    }

    pub fn target(&self, r: &Latent) -> Result<Latent> {
        r.with_data(r.data() + &self.shift_latent)
    }

    pub fn prior(&self, config: &Config) -> Result<GaussianPrior> {
        let shifts = BTreeMap::from([(SHIFT_INSTRUCTION.to_string(), self.config.shift)]);
        ShiftTaskPrior::build(&self.codec, config.schedule.build()?, shifts, 0.0, config.mask.feature_resolution)
    }

    pub fn dataset(&self) -> Result<TrainingDataset> {
        let entries = self
            .train
            .iter()
            .enumerate()
            .map(|(i, l)| DatasetEntry {
                source: EntrySource::Latent(l.clone()),
                class_label: SHIFT_CLASS.into(),
                instance_id: format!("blob-{i:03}"),
                origin: Origin::Generated,
                clip_score: None,
            })
            .collect();
        let spec = InstructionSpec {
            instruction: Self::instruction(),
            valid_classes: None,
        };
        build_dataset(entries, vec![spec], None)
    }

    /// Settings that solve this task in about two thousand steps.
    ///
    /// Guidance scales of 1 reduce classifier-free guidance to the fully
    /// conditional prediction, and `sigma/alpha` weighting with a
    /// zero-variance prior makes each sample's gradient the exact image
    /// residual.
    pub fn train_config(&self) -> Config {
        let mut c = Config::default();
        c.camera.render_resolution = 24;
        c.guidance.global = GuidanceConfig {
            gamma_image: 1.0,
            gamma_text: 1.0,
            gamma_text_t2i: 1.0,
        };
        c.loss.lambda_reg_global = 1000.0;
        c.editor.d_model = 16;
        c.editor.hidden = 32;
        c.train.optimizer = AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        };
        c.train.batch_size = 16;
        c.train.max_steps = Some(2000);
        c.train.epochs = 500;
        c.train.sds_weighting = SdsWeighting::SigmaOverAlpha;
        c.train.checkpoint_every_epochs = 0;
        c
    }

    pub fn editor(&self, config: &Config) -> Result<ToyEditor> {
        ToyEditor::init(
            config.editor.clone(),
            config.schedule.build()?,
            self.codec.id(),
            self.codec.latent_shape(),
            vec![Self::instruction()],
        )
    }

    /// `|(g(r) - r) - c| / |c|` in the Frobenius norm.
    pub fn relative_error(&self, source: &Latent, edited: &Latent) -> Result<f64> {
        if source.shape() != edited.shape() {
            return Err(Error::shape(source.shape(), edited.shape()));
        }
        let diff = edited.data() - source.data() - &self.shift_latent;
        Ok(frobenius(&diff) / frobenius(&self.shift_latent))
    }

    /// Mean relative error of the editor over the held-out latents.
    pub fn held_out_error(&self, editor: &dyn LatentEditor) -> Result<f64> {
        let mut total = 0.0;
        for r in &self.held_out {
            total += self.relative_error(r, &editor.edit(r, SHIFT_INSTRUCTION)?)?;
        }
        Ok(total / self.held_out.len().max(1) as f64)
    }
}

impl ShiftTask {
    /// Writes a self-contained data directory: `dataset.json` with the
    /// training latents, `eval_set.json` over the held-out latents and a
    /// `config.toml` holding [`ShiftTask::train_config`].
    pub fn write_data_dir(&self, dir: &Path) -> Result<()> {
        let write_all = |sub: &str, prefix: &str, latents: &[Latent]| -> Result<Vec<String>> {
            std::fs::create_dir_all(dir.join(sub))?;
            latents
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let rel = format!("{sub}/{prefix}-{i:03}.safetensors");
                    save_latent(&dir.join(&rel), l)?;
                    Ok(rel)
                })
                .collect()
        };
        let train = write_all("latents", "train", &self.train)?;
        let held_out = write_all("held_out", "held", &self.held_out)?;
        let manifest = DatasetManifest {
            instructions: Some(vec![InstructionSpec {
                instruction: Self::instruction(),
                valid_classes: None,
            }]),
            entries: train
                .into_iter()
                .enumerate()
                .map(|(i, latent)| ManifestEntry {
                    latent: Some(latent),
                    asset: None,
                    class_label: SHIFT_CLASS.into(),
                    instance_id: format!("blob-{i:03}"),
                    origin: Origin::Generated,
                    clip_score: None,
                })
                .collect(),
            clip_filter: None,
            priors: PriorSpec::ToyShift {
                shifts: BTreeMap::from([(SHIFT_INSTRUCTION.to_string(), self.config.shift)]),
                std: 0.0,
            },
        };
        let eval = EvalSetFile {
            pairs: held_out
                .into_iter()
                .enumerate()
                .map(|(i, latent)| EvalSetEntry {
                    latent,
                    class_label: SHIFT_CLASS.into(),
                    instance_id: format!("held-{i:03}"),
                    origin: Origin::Generated,
                    instruction: InstructionRef::Text(SHIFT_INSTRUCTION.into()),
                    source_text: "a blob".into(),
                    target_text: "a blob with a magenta centre".into(),
                })
                .collect(),
        };
        write_atomic(&dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        write_atomic(&dir.join("eval_set.json"), serde_json::to_string_pretty(&eval)?.as_bytes())?;
        write_atomic(&dir.join("config.toml"), self.train_config().to_toml_string()?.as_bytes())
    }
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_latent(codec: &ToyCodec, rng: &mut impl Rng, density: [f64; 2], color_std: f64) -> Result<Latent> {
    let normal = rand_distr::Normal::new(0.0, color_std).map_err(|e| Error::Config(e.to_string()))?;
    let (rows, cols) = codec.latent_shape();
    let data = Array2::from_shape_fn((rows, cols), |(_, c)| {
        if c == 0 {
            rng.random_range(density[0]..density[1])
        } else {
            rand_distr::Distribution::sample(&normal, rng)
        }
    });
    Latent::new(data, codec.id())
}
