//! On-disk training data directories.
//!
//! A data directory holds `dataset.json` plus the latents and meshes it
//! references by relative path. The manifest also names the diffusion priors
//! to distill from.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_dataset, reference_instruction_table, ClipFilter, DatasetEntry, EntrySource, InstructionSpec, Origin};
use super::{Priors, TrainingDataset};
use crate::codec::{AssetSource, ToyCodec};
use crate::config::Config;
use crate::container::load_latent;
use crate::error::{Error, Result};
use crate::geometry::load_geometry;
use crate::plugin::PluginSpec;
use crate::prior::plugin::PluginPrior;
use crate::prior::{Prior, ShiftTaskPrior};

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
    pub class_label: String,
    pub instance_id: String,
    #[serde(default = "scanned")]
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

fn scanned() -> Origin {
    Origin::Scanned
}

/// Which priors to distill from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// Analytic toy prior whose conditional mean shifts the centre colour.
    ToyShift {
        shifts: BTreeMap<String, [f64; 3]>,
        #[serde(default)]
        std: f64,
    },
    /// Adapter processes wrapping pretrained diffusion models.
    Plugin {
        #[serde(default)]
        global_ti2i: Option<PluginSpec>,
        #[serde(default)]
        local_ti2i: Option<PluginSpec>,
        #[serde(default)]
        t2i: Option<PluginSpec>,
    },
}

/// Priors instantiated from a [`PriorSpec`].
#[derive(Default)]
pub struct LoadedPriors {
    global_ti2i: Option<Box<dyn Prior>>,
    local_ti2i: Option<Box<dyn Prior>>,
    t2i: Option<Box<dyn Prior>>,
}

impl std::fmt::Debug for LoadedPriors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let id = |p: &Option<Box<dyn Prior>>| p.as_ref().map(|p| p.handle().model_id.clone());
        f.debug_struct("LoadedPriors")
            .field("global_ti2i", &id(&self.global_ti2i))
            .field("local_ti2i", &id(&self.local_ti2i))
            .field("t2i", &id(&self.t2i))
            .finish()
    }
}

impl LoadedPriors {
    pub fn priors(&self) -> Priors<'_> {
        Priors {
            global_ti2i: self.global_ti2i.as_deref(),
            local_ti2i: self.local_ti2i.as_deref(),
            t2i: self.t2i.as_deref(),
        }
    }
}

impl PriorSpec {
    /// `toy` is required for the toy prior, which renders through the toy codec.
    pub fn instantiate(&self, config: &Config, toy: Option<&ToyCodec>) -> Result<LoadedPriors> {
        match self {
            PriorSpec::ToyShift { shifts, std } => {
                let codec = toy.ok_or_else(|| Error::Capability("the toy_shift prior needs the toy codec".into()))?;
                let build = || {
                    ShiftTaskPrior::build(
                        codec,
                        config.schedule.build()?,
                        shifts.clone(),
                        *std,
                        config.mask.feature_resolution,
                    )
                };
                Ok(LoadedPriors {
                    global_ti2i: Some(Box::new(build()?)),
                    local_ti2i: Some(Box::new(build()?)),
                    t2i: Some(Box::new(build()?)),
                })
            }
            PriorSpec::Plugin {
                global_ti2i,
                local_ti2i,
                t2i,
            } => {
                let spawn = |s: &Option<PluginSpec>| -> Result<Option<Box<dyn Prior>>> {
                    s.as_ref()
                        .map(|s| PluginPrior::spawn(s).map(|p| Box::new(p) as Box<dyn Prior>))
                        .transpose()
                };
                Ok(LoadedPriors {
                    global_ti2i: spawn(global_ti2i)?,
                    local_ti2i: spawn(local_ti2i)?,
                    t2i: spawn(t2i)?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Instructions with their valid classes; the reference table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<Vec<InstructionSpec>>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_filter: Option<ClipFilter>,
    pub priors: PriorSpec,
}

/// Rejects absolute paths and parent components so a manifest cannot reach
/// outside its directory.
pub fn relative_path(base: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(Error::Format(format!("path {rel:?} must be relative and stay inside the data directory")));
    }
    Ok(base.join(p))
}

impl DatasetManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json)?;
        if m.entries.is_empty() {
            return Err(Error::Dataset("dataset has no entries".into()));
        }
        for e in &m.entries {
            if e.latent.is_some() == e.asset.is_some() {
                return Err(Error::Dataset(format!(
                    "entry {:?} needs exactly one of latent or asset",
                    e.instance_id
                )));
            }
            for p in e.latent.iter().chain(&e.asset) {
                relative_path(Path::new(""), p)?;
            }
            if e.clip_score.is_some_and(|s| !s.is_finite()) {
                return Err(Error::Dataset(format!("entry {:?} has a non-finite score", e.instance_id)));
            }
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(dir.join(DATASET_MANIFEST))?)
    }

    /// Reads every referenced latent and mesh and assembles the dataset.
    pub fn dataset(&self, dir: &Path) -> Result<TrainingDataset> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let source = match (&e.latent, &e.asset) {
                (Some(l), None) => EntrySource::Latent(load_latent(&relative_path(dir, l)?)?),
                (None, Some(a)) => {
                    let points = load_geometry(&relative_path(dir, a)?)?;
                    EntrySource::Asset(AssetSource::from_points(points, e.class_label.clone(), e.instance_id.clone()))
                }
                _ => unreachable!("checked by parse"),
            };
            entries.push(DatasetEntry {
                source,
                class_label: e.class_label.clone(),
                instance_id: e.instance_id.clone(),
                origin: e.origin,
                clip_score: e.clip_score,
            });
        }
        let instructions = self.instructions.clone().unwrap_or_else(reference_instruction_table);
        build_dataset(entries, instructions, self.clip_filter)
    }
}
