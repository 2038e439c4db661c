//! Loading codecs, editors and evaluation models from command-line arguments.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use latedit_core::codec::plugin::PluginCodec;
use latedit_core::codec::{ToyCodec, ToyCodecConfig};
use latedit_core::eval::{Backbone, Embedder, PluginBackbone, PluginEmbedder, ToyBackbone, ToyEmbedder};
use latedit_core::plugin::PluginSpec;
use latedit_core::{Codec, DifferentiableCodec, LatentEditor, ToyEditor};

/// `toy` selects the built-in model; anything else is a path to an adapter spec.
pub const TOY: &str = "toy";

pub fn read_spec(path: &str) -> Result<PluginSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading adapter spec {path}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing adapter spec {path}"))
}

pub enum CodecChoice {
    Toy(Arc<ToyCodec>),
    Plugin(Arc<PluginCodec>),
}

impl CodecChoice {
    pub fn load(arg: &str) -> Result<Self> {
        if arg == TOY {
            return Ok(CodecChoice::Toy(Arc::new(ToyCodec::new(ToyCodecConfig::default())?)));
        }
        let spec = read_spec(arg)?;
        Ok(CodecChoice::Plugin(Arc::new(PluginCodec::spawn(&spec)?)))
    }

    pub fn differentiable(&self) -> &dyn DifferentiableCodec {
        match self {
            CodecChoice::Toy(c) => c.as_ref(),
            CodecChoice::Plugin(c) => c.as_ref(),
        }
    }

    pub fn codec(&self) -> &dyn Codec {
        self.differentiable()
    }

    pub fn shared(&self) -> Arc<dyn Codec> {
        match self {
            CodecChoice::Toy(c) => c.clone(),
            CodecChoice::Plugin(c) => c.clone(),
        }
    }

    pub fn toy(&self) -> Option<&Arc<ToyCodec>> {
        match self {
            CodecChoice::Toy(c) => Some(c),
            CodecChoice::Plugin(_) => None,
        }
    }
}

pub fn load_editor(ckpt: &Path, codec: &dyn Codec) -> Result<ToyEditor> {
    let (editor, _) = ToyEditor::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if editor.codec_id() != codec.id() {
        bail!(
            "checkpoint was trained for codec {:?} but {:?} is loaded",
            editor.codec_id(),
            codec.id()
        );
    }
    Ok(editor)
}

pub fn load_embedder(arg: &str) -> Result<Box<dyn Embedder>> {
    if arg == TOY {
        return Ok(Box::new(ToyEmbedder::default()));
    }
    Ok(Box::new(PluginEmbedder::spawn(&read_spec(arg)?)?))
}

pub fn load_backbone(arg: &str, layer: usize) -> Result<Box<dyn Backbone>> {
    if arg == TOY {
        return Ok(Box::new(ToyBackbone::default()));
    }
    Ok(Box::new(PluginBackbone::spawn(&read_spec(arg)?, layer)?))
}
