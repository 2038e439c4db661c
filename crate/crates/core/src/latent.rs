use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D asset code of shape `D x C`, tagged with the codec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    data: Array2<f64>,
    codec_id: String,
}

impl Latent {
    pub fn new(data: Array2<f64>, codec_id: impl Into<String>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("latent entry {bad} is not finite")));
        }
        Ok(Self {
            data,
            codec_id: codec_id.into(),
        })
    }

    pub fn zeros(shape: (usize, usize), codec_id: impl Into<String>) -> Self {
        Self {
            data: Array2::zeros(shape),
            codec_id: codec_id.into(),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn codec_id(&self) -> &str {
        &self.codec_id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Replaces the data, keeping the codec id.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::shape(self.data.dim(), data.dim()));
        }
        Self::new(data, self.codec_id.clone())
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(expected, self.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Global,
    Local,
}

/// A natural-language edit instruction.
///
/// Local edits also carry the full target description used by the
/// text-to-image prior and the word whose cross-attention map becomes the
/// edit mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawInstruction", into = "RawInstruction")]
pub struct EditInstruction {
    text: String,
    kind: EditKind,
    target_description: Option<String>,
    attention_token: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawInstruction {
    text: String,
    kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention_token: Option<String>,
}

impl TryFrom<RawInstruction> for EditInstruction {
    type Error = Error;

    fn try_from(r: RawInstruction) -> Result<Self> {
        match r.kind {
            EditKind::Global => {
                let mut g = EditInstruction::global(r.text)?;
                g.target_description = r.target_description;
                g.attention_token = r.attention_token;
                Ok(g)
            }
            EditKind::Local => EditInstruction::local(
                r.text,
                r.target_description.unwrap_or_default(),
                r.attention_token.unwrap_or_default(),
            ),
        }
    }
}

impl From<EditInstruction> for RawInstruction {
    fn from(e: EditInstruction) -> Self {
        RawInstruction {
            text: e.text,
            kind: e.kind,
            target_description: e.target_description,
            attention_token: e.attention_token,
        }
    }
}

impl EditInstruction {
    pub fn global(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Instruction("instruction text is empty".into()));
        }
        Ok(Self {
            text,
            kind: EditKind::Global,
            target_description: None,
            attention_token: None,
        })
    }

    pub fn local(
        text: impl Into<String>,
        target_description: impl Into<String>,
        attention_token: impl Into<String>,
    ) -> Result<Self> {
        let text = text.into();
        let target = target_description.into();
        let token = attention_token.into();
        if text.trim().is_empty() {
            return Err(Error::Instruction("instruction text is empty".into()));
        }
        if target.trim().is_empty() {
            return Err(Error::Instruction(format!("local edit {text:?} needs a target description")));
        }
        if token.trim().is_empty() {
            return Err(Error::Instruction(format!("local edit {text:?} needs an attention token")));
        }
        Ok(Self {
            text,
            kind: EditKind::Local,
            target_description: Some(target),
            attention_token: Some(token),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> EditKind {
        self.kind
    }

    pub fn target_description(&self) -> Option<&str> {
        self.target_description.as_deref()
    }

    pub fn attention_token(&self) -> Option<&str> {
        self.attention_token.as_deref()
    }

    /// Target description with any `{class}` placeholder filled in.
    pub fn target_for_class(&self, class_label: &str) -> Option<String> {
        self.target_description
            .as_deref()
            .map(|t| t.replace("{class}", class_label))
    }
}
