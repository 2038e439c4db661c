//! Training set assembly: instance sources, instruction validity and filtering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::{AssetSource, Codec};
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, EditKind, Latent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Scanned,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntrySource {
    Latent(Latent),
    Asset(AssetSource),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub source: EntrySource,
    pub class_label: String,
    pub instance_id: String,
    pub origin: Origin,
    /// Image-text embedding score of a generated asset against its class prompt.
    pub clip_score: Option<f64>,
}

/// An instruction and the classes it may be paired with (`None`: every class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSpec {
    #[serde(flatten)]
    pub instruction: EditInstruction,
    #[serde(default)]
    pub valid_classes: Option<BTreeSet<String>>,
}

/// How generated assets are filtered by embedding score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipFilter {
    /// Keep the `k` best-scoring generated instances per class.
    TopK(usize),
    /// Keep generated instances scoring at least this value.
    Threshold(f64),
}

#[derive(Debug, Clone)]
pub struct TrainingDataset {
    entries: Vec<DatasetEntry>,
    instructions: Vec<EditInstruction>,
    /// instruction text -> valid class labels
    validity: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Deserialize)]
struct TableRow {
    text: String,
    kind: EditKind,
    #[serde(default)]
    target_description: Option<String>,
    #[serde(default)]
    attention_token: Option<String>,
    generated_classes: Vec<String>,
    scanned_classes: Vec<String>,
}

#[derive(Deserialize)]
struct Table {
    instructions: Vec<TableRow>,
}

/// The five reference instructions with their valid object classes.
pub fn reference_instruction_table() -> Vec<InstructionSpec> {
    let table: Table =
        serde_json::from_str(include_str!("../../data/instruction_table.json")).expect("bundled table parses");
    table
        .instructions
        .into_iter()
        .map(|r| {
            let instruction = match r.kind {
                EditKind::Global => EditInstruction::global(r.text),
                EditKind::Local => EditInstruction::local(
                    r.text,
                    r.target_description.unwrap_or_default(),
                    r.attention_token.unwrap_or_default(),
                ),
            }
            .expect("bundled instructions are valid");
            let classes = r.generated_classes.into_iter().chain(r.scanned_classes).collect();
            InstructionSpec {
                instruction,
                valid_classes: Some(classes),
            }
        })
        .collect()
}

fn apply_filter(entries: Vec<DatasetEntry>, filter: ClipFilter) -> Vec<DatasetEntry> {
    let score = |e: &DatasetEntry| e.clip_score.unwrap_or(f64::NEG_INFINITY);
    match filter {
        ClipFilter::Threshold(th) => entries
            .into_iter()
            .filter(|e| e.origin == Origin::Scanned || score(e) >= th)
            .collect(),
        ClipFilter::TopK(k) => {
            let mut by_class: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
            for (i, e) in entries.iter().enumerate() {
                if e.origin == Origin::Generated {
                    by_class.entry(e.class_label.clone()).or_default().push((i, score(e)));
                }
            }
            let mut keep = BTreeSet::new();
            for mut v in by_class.into_values() {
                v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                keep.extend(v.into_iter().take(k).map(|(i, _)| i));
            }
            entries
                .into_iter()
                .enumerate()
                .filter(|(i, e)| e.origin == Origin::Scanned || keep.contains(i))
                .map(|(_, e)| e)
                .collect()
        }
    }
}

pub fn build_dataset(
    sources: Vec<DatasetEntry>,
    instructions: Vec<InstructionSpec>,
    filter: Option<ClipFilter>,
) -> Result<TrainingDataset> {
    if instructions.is_empty() {
        return Err(Error::Dataset("no instructions".into()));
    }
    let entries = match filter {
        Some(f) => apply_filter(sources, f),
        None => sources,
    };
    let all_classes: BTreeSet<String> = entries.iter().map(|e| e.class_label.clone()).collect();
    let mut validity = BTreeMap::new();
    let mut list = Vec::new();
    for spec in instructions {
        let text = spec.instruction.text().to_string();
        if validity.contains_key(&text) {
            return Err(Error::Dataset(format!("duplicate instruction {text:?}")));
        }
        validity.insert(text, spec.valid_classes.unwrap_or_else(|| all_classes.clone()));
        list.push(spec.instruction);
    }
    let before = entries.len();
    let entries: Vec<_> = entries
        .into_iter()
        .filter(|e| validity.values().any(|classes| classes.contains(&e.class_label)))
        .collect();
    if entries.len() < before {
        tracing::info!(dropped = before - entries.len(), "entries without a valid instruction");
    }
    let ds = TrainingDataset {
        entries,
        instructions: list,
        validity,
    };
    if ds.pairs().is_empty() {
        return Err(Error::Dataset("no valid instance-instruction pairs".into()));
    }
    Ok(ds)
}

impl TrainingDataset {
    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn instructions(&self) -> &[EditInstruction] {
        &self.instructions
    }

    pub fn is_valid(&self, instruction: &str, class_label: &str) -> bool {
        self.validity
            .get(instruction)
            .is_some_and(|c| c.contains(class_label))
    }

    /// Valid `(entry index, instruction index)` pairs; one epoch visits each once.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ei, e) in self.entries.iter().enumerate() {
            for (ii, y) in self.instructions.iter().enumerate() {
                if self.is_valid(y.text(), &e.class_label) {
                    out.push((ei, ii));
                }
            }
        }
        out
    }

    /// Source latents, encoding assets once.
    pub fn source_latents(&self, codec: &dyn Codec) -> Result<Vec<Latent>> {
        self.entries
            .iter()
            .map(|e| match &e.source {
                EntrySource::Latent(l) => {
                    l.check_shape(codec.latent_shape())?;
                    Ok(l.clone())
                }
                EntrySource::Asset(a) => codec.encode(a),
            })
            .collect()
    }

    /// Keeps only the listed instructions, in the given order.
    pub fn restrict_instructions(&self, texts: &[String]) -> Result<Self> {
        let mut instructions = Vec::new();
        for t in texts {
            let y = self
                .instructions
                .iter()
                .find(|y| y.text() == t)
                .ok_or_else(|| Error::Dataset(format!("instruction {t:?} is not in the dataset")))?;
            instructions.push(y.clone());
        }
        let specs = instructions
            .into_iter()
            .map(|y| InstructionSpec {
                valid_classes: self.validity.get(y.text()).cloned(),
                instruction: y,
            })
            .collect();
        build_dataset(self.entries.clone(), specs, None)
    }
}
