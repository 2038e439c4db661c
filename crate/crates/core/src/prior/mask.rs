//! Cross-attention maps to a soft edit mask.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Prior;
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Denoiser step at which attention is read.
    pub timestep: usize,
    pub feature_resolution: usize,
    pub out_resolution: usize,
    pub threshold: f64,
    /// Radius of the square dilation element, in output pixels.
    pub dilation_px: usize,
    pub blur_sigma_px: f64,
    /// Kernel half-width in units of sigma.
    pub blur_truncate: f64,
    /// Model the maps are read from, recorded for provenance.
    pub source_model: String,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            timestep: 600,
            feature_resolution: 32,
            out_resolution: 128,
            threshold: 0.5,
            dilation_px: 10,
            blur_sigma_px: 5.0,
            blur_truncate: 3.0,
            source_model: "magicbrush".into(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_resolution > 0
            && self.out_resolution > 0
            && self.threshold.is_finite()
            && self.blur_sigma_px.is_finite()
            && self.blur_sigma_px >= 0.0
            && self.blur_truncate.is_finite()
            && self.blur_truncate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask config {self:?}")))
        }
    }

    pub fn blur_radius(&self) -> usize {
        (self.blur_truncate * self.blur_sigma_px).ceil() as usize
    }
}

/// Attention maps for one token, one per layer/head, all at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    maps: Vec<Array2<f64>>,
    t: usize,
}

impl AttentionStack {
    pub fn new(maps: Vec<Array2<f64>>, t: usize, resolution: usize) -> Result<Self> {
        for m in &maps {
            if m.dim() != (resolution, resolution) {
                return Err(Error::shape([resolution, resolution], m.shape()));
            }
            if !m.iter().all(|&v| v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput("attention entries must be finite and >= 0".into()));
            }
        }
        Ok(Self { maps, t })
    }

    pub fn maps(&self) -> &[Array2<f64>] {
        &self.maps
    }

    pub fn t(&self) -> usize {
        self.t
    }
}

/// Soft mask in `[0, 1]`; 1 marks the region allowed to change.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    m: Array2<f64>,
}

impl EditMask {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if !m.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { m })
    }

    pub fn filled(resolution: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((resolution, resolution), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.m.dim()
    }
}

/// Normalizes each map by its own maximum, then averages. All-zero maps contribute zeros.
pub fn normalize_and_average(stack: &AttentionStack, resolution: usize) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((resolution, resolution));
    if stack.maps.is_empty() {
        return acc;
    }
    for m in &stack.maps {
        let max = m.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            acc.zip_mut_with(m, |a, &v| *a += v / max);
        }
    }
    let n = stack.maps.len() as f64;
    acc.mapv_inplace(|v| v / n);
    acc
}

pub fn threshold(m: &Array2<f64>, level: f64) -> Array2<f64> {
    m.mapv(|v| if v >= level { 1.0 } else { 0.0 })
}

/// Max filter with a `(2r+1) x (2r+1)` square, restricted to in-bounds pixels.
pub fn dilate_square(m: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(w - 1);
            rows[[i, j]] = (lo..=hi).map(|c| m[[i, c]]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(h - 1);
        for j in 0..w {
            out[[i, j]] = (lo..=hi).map(|r| rows[[r, j]]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Normalized 1D Gaussian weights for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma == 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur, horizontal pass first, borders clamped to the edge.
pub fn gaussian_blur(m: &Array2<f64>, sigma: f64, radius: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (o, wt) in k.iter().enumerate() {
                s += wt * m[[i, clamp(j as isize + o as isize - r, w)]];
            }
            tmp[[i, j]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (o, wt) in k.iter().enumerate() {
                s += wt * tmp[[clamp(i as isize + o as isize - r, h), j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Full attention-to-mask pipeline.
pub fn mask_from_attention(stack: &AttentionStack, cfg: &MaskConfig) -> Result<EditMask> {
    cfg.validate()?;
    let avg = normalize_and_average(stack, cfg.feature_resolution);
    let up = resize_bilinear(avg.view(), cfg.out_resolution, cfg.out_resolution);
    let hard = threshold(&up, cfg.threshold);
    let grown = dilate_square(&hard, cfg.dilation_px);
    let soft = gaussian_blur(&grown, cfg.blur_sigma_px, cfg.blur_radius());
    EditMask::new(soft.mapv(|v| v.clamp(0.0, 1.0)))
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// True when the words of `token` occur contiguously in `text`, ignoring case and punctuation.
pub fn token_occurs(text: &str, token: &str) -> bool {
    let needle = words(token);
    if needle.is_empty() {
        return false;
    }
    words(text).windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Reads the prior's attention for `token` at `cfg.timestep` and turns it into a mask.
pub fn extract_edit_mask(
    prior: &dyn Prior,
    x_src: &Image,
    instruction: &str,
    token: &str,
    cfg: &MaskConfig,
) -> Result<EditMask> {
    if !prior.handle().capabilities.attention_maps {
        return Err(Error::Capability(format!("{} does not expose attention maps", prior.handle().model_id)));
    }
    if !token_occurs(instruction, token) {
        return Err(Error::Token(format!("{token:?} does not occur in {instruction:?}")));
    }
    let stack = prior.attention_maps(x_src, Some(x_src), instruction, token, cfg.timestep)?;
    for m in stack.maps() {
        if m.dim() != (cfg.feature_resolution, cfg.feature_resolution) {
            return Err(Error::Backend(format!(
                "attention map {:?} != configured {}x{}",
                m.shape(),
                cfg.feature_resolution,
                cfg.feature_resolution
            )));
        }
    }
    mask_from_attention(&stack, cfg)
}
