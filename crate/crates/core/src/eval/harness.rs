use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{clip_dir, clip_sim, structure_distance, Backbone, Embedder};
use super::report::{EvalReport, PairResult};
use super::EvalConfig;
use crate::codec::{uniform_viewpoints, Codec};
use crate::config::CameraConfig;
use crate::container::load_latent;
use crate::editor::LatentEditor;
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, EditKind, Latent};
use crate::tensor::{resize_image, Image};
use crate::trainer::manifest::relative_path;
use crate::trainer::Origin;

/// One instance-instruction pair of the held-out evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub latent: Latent,
    pub class_label: String,
    pub instance_id: String,
    pub origin: Origin,
    pub instruction: EditInstruction,
    pub source_text: String,
    pub target_text: String,
}

impl EvalPair {
    pub fn validate(&self) -> Result<()> {
        if self.source_text.trim().is_empty() || self.target_text.trim().is_empty() {
            return Err(Error::InvalidInput(format!(
                "pair {}/{:?}: source and target texts must be non-empty",
                self.instance_id,
                self.instruction.text()
            )));
        }
        Ok(())
    }
}

/// An instruction given either by its text (looked up in a catalog) or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstructionRef {
    Text(String),
    Full(EditInstruction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetEntry {
    /// Latent container path, relative to the eval-set file.
    pub latent: String,
    pub class_label: String,
    pub instance_id: String,
    #[serde(default = "scanned")]
    pub origin: Origin,
    pub instruction: InstructionRef,
    pub source_text: String,
    pub target_text: String,
}

fn scanned() -> Origin {
    Origin::Scanned
}

/// On-disk evaluation set: `{"pairs": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetFile {
    pub pairs: Vec<EvalSetEntry>,
}

impl EvalSetFile {
    pub fn parse(json: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(json)?;
        if f.pairs.is_empty() {
            return Err(Error::InvalidInput("evaluation set has no pairs".into()));
        }
        for e in &f.pairs {
            if e.source_text.trim().is_empty() || e.target_text.trim().is_empty() {
                return Err(Error::InvalidInput(format!("pair {}: empty source or target text", e.instance_id)));
            }
            if e.latent.is_empty() {
                return Err(Error::InvalidInput(format!("pair {}: empty latent path", e.instance_id)));
            }
        }
        Ok(f)
    }

    /// Loads latents (relative to `base_dir`) and resolves instruction texts against `catalog`.
    pub fn resolve(&self, base_dir: &Path, catalog: &[EditInstruction]) -> Result<Vec<EvalPair>> {
        self.pairs
            .iter()
            .map(|e| {
                let instruction = match &e.instruction {
                    InstructionRef::Full(i) => i.clone(),
                    InstructionRef::Text(t) => catalog.iter().find(|i| i.text() == t).cloned().ok_or_else(|| {
                        Error::Instruction(format!("eval set instruction {t:?} is not in the model's catalog"))
                    })?,
                };
                let pair = EvalPair {
                    latent: load_latent(&relative_path(base_dir, &e.latent)?)?,
                    class_label: e.class_label.clone(),
                    instance_id: e.instance_id.clone(),
                    origin: e.origin,
                    instruction,
                    source_text: e.source_text.clone(),
                    target_text: e.target_text.clone(),
                };
                pair.validate()?;
                Ok(pair)
            })
            .collect()
    }

    pub fn load(path: &Path, catalog: &[EditInstruction]) -> Result<Vec<EvalPair>> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text)?.resolve(base, catalog)
    }
}

/// Everything `evaluate` needs besides the models.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub camera: CameraConfig,
    pub eval: EvalConfig,
    pub config_hash: String,
}

fn render_views(codec: &dyn Codec, latent: &Latent, ctx: &EvalContext) -> Result<Vec<Image>> {
    let field = codec.decode(latent)?;
    let n = ctx.eval.resolution;
    uniform_viewpoints(&ctx.camera, ctx.eval.views)
        .iter()
        .map(|v| {
            let view = codec.render(&field, v, ctx.camera.render_resolution)?;
            Ok(resize_image(&view.rgb, n, n))
        })
        .collect()
}

fn evaluate_pair(
    editor: &dyn LatentEditor,
    pair: &EvalPair,
    codec: &dyn Codec,
    embedder: &dyn Embedder,
    backbone: &dyn Backbone,
    ctx: &EvalContext,
) -> Result<PairResult> {
    pair.validate()?;
    let edited = editor.edit(&pair.latent, pair.instruction.text())?;
    let src = render_views(codec, &pair.latent, ctx)?;
    let out = render_views(codec, &edited, ctx)?;
    let structure = match pair.instruction.kind() {
        EditKind::Global => {
            let mut total = 0.0;
            for (a, b) in src.iter().zip(&out) {
                total += structure_distance(a, b, backbone)?;
            }
            Some(total / src.len() as f64)
        }
        EditKind::Local => None,
    };
    Ok(PairResult {
        instance_id: pair.instance_id.clone(),
        class_label: pair.class_label.clone(),
        instruction: pair.instruction.text().to_string(),
        kind: pair.instruction.kind(),
        clip_sim: clip_sim(&out, &pair.target_text, embedder)?,
        clip_dir: clip_dir(&src, &out, &pair.source_text, &pair.target_text, embedder)?,
        structure_distance: structure,
    })
}

/// Edits every pair, renders source and result from uniformly spaced views,
/// resizes, and scores them. Pairs run in parallel; results keep input order.
pub fn evaluate(
    editor: &dyn LatentEditor,
    eval_set: &[EvalPair],
    codec: &dyn Codec,
    embedder: &dyn Embedder,
    backbone: &dyn Backbone,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    ctx.eval.validate()?;
    ctx.camera.validate()?;
    if eval_set.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    for p in eval_set {
        if editor.instruction(p.instruction.text()).is_none() {
            return Err(Error::Instruction(format!(
                "instruction {:?} was not trained into this editor",
                p.instruction.text()
            )));
        }
    }
    let pairs = eval_set
        .par_iter()
        .map(|p| evaluate_pair(editor, p, codec, embedder, backbone, ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(
        pairs,
        ctx.eval.views,
        ctx.eval.resolution,
        editor.weights_hash(),
        ctx.config_hash.clone(),
        embedder.id().to_string(),
        backbone.id().to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SET: &str = r#"{"pairs": [
        {"latent": "a.safetensors", "class_label": "chair", "instance_id": "a",
         "instruction": "make it pink", "source_text": "a chair", "target_text": "a pink chair"},
        {"latent": "a.safetensors", "class_label": "chair", "instance_id": "a", "origin": "generated",
         "instruction": {"text": "put a hat on it", "kind": "local", "target_description": "a chair wearing a hat", "attention_token": "hat"},
         "source_text": "a chair", "target_text": "a chair wearing a hat"}
    ]}"#;

    #[test]
    fn parses_text_and_inline_instructions() {
        let f = EvalSetFile::parse(SET).unwrap();
        assert_eq!(f.pairs.len(), 2);
        assert!(matches!(f.pairs[0].instruction, InstructionRef::Text(_)));
        assert!(matches!(f.pairs[1].instruction, InstructionRef::Full(_)));
        assert_eq!(f.pairs[1].origin, Origin::Generated);
    }

    #[test]
    fn rejects_empty_texts_and_sets() {
        assert!(EvalSetFile::parse(r#"{"pairs": []}"#).is_err());
        let bad = SET.replacen("\"a pink chair\"", "\" \"", 1);
        assert!(EvalSetFile::parse(&bad).is_err());
        assert!(EvalSetFile::parse("{}").is_err());
    }

    #[test]
    fn resolve_loads_latents_and_checks_catalog() {
        let dir = tempfile::tempdir().unwrap();
        crate::container::save_latent(&dir.path().join("a.safetensors"), &Latent::zeros((2, 2), "toy")).unwrap();
        let f = EvalSetFile::parse(SET).unwrap();
        assert!(matches!(f.resolve(dir.path(), &[]), Err(Error::Instruction(_))));
        let catalog = [EditInstruction::global("make it pink").unwrap()];
        let pairs = f.resolve(dir.path(), &catalog).unwrap();
        assert_eq!(pairs[0].latent.shape(), (2, 2));
        assert_eq!(pairs[1].instruction.kind(), EditKind::Local);
    }
}
