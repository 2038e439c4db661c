//! Latent arithmetic: edit strength, chained edits and transferable edit vectors.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{read_tensors, sidecar_path, take_2d, tensors_from_bytes, write_atomic, write_tensors, DTYPE};
use crate::editor::LatentEditor;
use crate::error::{Error, Result};
use crate::latent::Latent;

fn check_pair(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `r_src + eta (r_edit - r_src)`, evaluated as `(1 - eta) r_src + eta r_edit`
/// so that `eta = 0` and `eta = 1` return the endpoints bit for bit.
/// Extrapolation (`eta > 1`) is not clamped.
pub fn scale_edit(r_src: &Latent, r_edit: &Latent, eta: f64) -> Result<Latent> {
    check_pair(r_src, r_edit)?;
    if !eta.is_finite() {
        return Err(Error::InvalidInput(format!("eta must be finite (got {eta})")));
    }
    let data = ndarray::Zip::from(r_src.data())
        .and(r_edit.data())
        .map_collect(|&s, &e| (1.0 - eta) * s + eta * e);
    r_src.with_data(data)
}

/// Left fold of single edits. Returns the final latent and every intermediate, starting with `r`.
pub fn sequential_edit(editor: &dyn LatentEditor, r: &Latent, instructions: &[&str]) -> Result<(Latent, Vec<Latent>)> {
    let mut chain = vec![r.clone()];
    for y in instructions {
        let next = editor.edit(chain.last().expect("non-empty"), y)?;
        chain.push(next);
    }
    Ok((chain.last().expect("non-empty").clone(), chain))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditVector {
    delta: Array2<f64>,
    instruction: String,
    n_pairs: usize,
    codec_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditVectorMeta {
    pub kind: String,
    pub instruction: String,
    pub n_pairs: usize,
    pub codec_id: String,
    pub shape: (usize, usize),
    pub dtype: String,
}

const KIND: &str = "edit_vector";
const DELTA: &str = "delta";

impl EditVector {
    pub fn new(delta: Array2<f64>, instruction: impl Into<String>, n_pairs: usize, codec_id: impl Into<String>) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::InvalidInput("an edit vector needs at least one pair".into()));
        }
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("edit vector has non-finite entries".into()));
        }
        Ok(Self {
            delta,
            instruction: instruction.into(),
            n_pairs,
            codec_id: codec_id.into(),
        })
    }

    pub fn delta(&self) -> &Array2<f64> {
        &self.delta
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn codec_id(&self) -> &str {
        &self.codec_id
    }

    pub fn meta(&self) -> EditVectorMeta {
        EditVectorMeta {
            kind: KIND.into(),
            instruction: self.instruction.clone(),
            n_pairs: self.n_pairs,
            codec_id: self.codec_id.clone(),
            shape: self.delta.dim(),
            dtype: DTYPE.into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = std::collections::BTreeMap::new();
        t.insert(DELTA.to_string(), self.delta.clone().into_dyn());
        write_tensors(path, &t)?;
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&self.meta())?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = std::fs::read_to_string(sidecar_path(path))?;
        let tensors = read_tensors(path)?;
        Self::from_tensors(tensors, &meta)
    }

    pub fn from_parts(bytes: &[u8], sidecar: &str) -> Result<Self> {
        Self::from_tensors(tensors_from_bytes(bytes)?, sidecar)
    }

    fn from_tensors(mut tensors: std::collections::BTreeMap<String, ndarray::ArrayD<f64>>, sidecar: &str) -> Result<Self> {
        let meta: EditVectorMeta = serde_json::from_str(sidecar)?;
        if meta.kind != KIND || meta.dtype != DTYPE {
            return Err(Error::Format(format!("not an f64 edit vector: {:?}/{:?}", meta.kind, meta.dtype)));
        }
        let delta = take_2d(&mut tensors, DELTA)?;
        if delta.dim() != meta.shape {
            return Err(Error::shape(meta.shape, delta.dim()));
        }
        Self::new(delta, meta.instruction, meta.n_pairs, meta.codec_id)
    }
}

/// Mean residual over `(r_src, r_edit)` pairs.
pub fn extract_edit_vector(pairs: &[(Latent, Latent)], instruction: &str) -> Result<EditVector> {
    let (first, _) = pairs
        .first()
        .ok_or_else(|| Error::InvalidInput("no latent pairs".into()))?;
    let mut sum = Array2::<f64>::zeros(first.shape());
    for (s, e) in pairs {
        check_pair(first, s)?;
        check_pair(s, e)?;
        sum += e.data();
        sum -= s.data();
    }
    let n = pairs.len();
    if n > 1 {
        sum.mapv_inplace(|v| v / n as f64);
    }
    EditVector::new(sum, instruction, n, first.codec_id())
}

/// `r + eta * delta`.
pub fn apply_edit_vector(r: &Latent, v: &EditVector, eta: f64) -> Result<Latent> {
    if r.shape() != v.delta.dim() {
        return Err(Error::shape(v.delta.dim(), r.shape()));
    }
    if !eta.is_finite() {
        return Err(Error::InvalidInput(format!("eta must be finite (got {eta})")));
    }
    let mut data = r.data().clone();
    data.scaled_add(eta, &v.delta);
    r.with_data(data)
}
