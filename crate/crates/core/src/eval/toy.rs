//! Deterministic stand-ins for the embedding model and the structure backbone.

use sha2::{Digest, Sha256};

use super::metrics::{Backbone, Embedder};
use crate::error::{Error, Result};
use crate::tensor::{cosine, Image};

const COLORS: &[(&str, [f64; 3])] = &[
    ("black", [0.0, 0.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("brown", [0.6, 0.3, 0.1]),
    ("gold", [1.0, 0.84, 0.0]),
    ("golden", [1.0, 0.84, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("green", [0.0, 1.0, 0.0]),
    ("grey", [0.5, 0.5, 0.5]),
    ("orange", [1.0, 0.5, 0.0]),
    ("pink", [1.0, 0.75, 0.8]),
    ("purple", [0.5, 0.0, 0.5]),
    ("red", [1.0, 0.0, 0.0]),
    ("silver", [0.75, 0.75, 0.75]),
    ("white", [1.0, 1.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
];

/// Colour-aware bag-of-words embedder.
///
/// The first three coordinates of an image embedding are its mean colour
/// centred on mid-grey. Texts place the mean of their colour words in the
/// same coordinates and hash every other word into the remaining ones, so
/// images can only ever match the colour part of a prompt.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    dim: usize,
    word_scale: f64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { dim: 16, word_scale: 0.1 }
    }
}

impl ToyEmbedder {
    pub fn new(dim: usize, word_scale: f64) -> Result<Self> {
        if dim < 4 || !(word_scale.is_finite() && word_scale >= 0.0) {
            return Err(Error::InvalidInput(format!("toy embedder needs dim >= 4 and a finite scale (got {dim}, {word_scale})")));
        }
        Ok(Self { dim, word_scale })
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let digest = Sha256::digest(word.as_bytes());
        let n = self.dim - 3;
        (0..n)
            .map(|i| (f64::from(digest[i % digest.len()]) / 255.0 - 0.5) * self.word_scale)
            .collect()
    }
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &str {
        "toy-color-bow"
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w, c) = image.dim();
        if c != 3 || h * w == 0 {
            return Err(Error::shape("(h, w, 3)", image.dim()));
        }
        let mut v = vec![0.0; self.dim];
        for px in image.rows() {
            for k in 0..3 {
                v[k] += px[k];
            }
        }
        for x in v.iter_mut().take(3) {
            *x = *x / (h * w) as f64 - 0.5;
        }
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut colour = [0.0; 3];
        let mut n_colour = 0usize;
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let word = word.to_lowercase();
            if let Ok(i) = COLORS.binary_search_by(|(name, _)| name.cmp(&word.as_str())) {
                for k in 0..3 {
                    colour[k] += COLORS[i].1[k];
                }
                n_colour += 1;
            } else {
                for (x, y) in v[3..].iter_mut().zip(self.word_vector(&word)) {
                    *x += y;
                }
            }
        }
        if n_colour > 0 {
            for k in 0..3 {
                v[k] = colour[k] / n_colour as f64 - 0.5;
            }
        }
        Ok(v)
    }
}

/// Patch self-similarity descriptor.
///
/// The image is cut into a `grid x grid` lattice; each patch's key is its
/// mean colour minus the image mean, and the descriptor is the matrix of
/// key cosines (undefined cosines are 0).
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    grid: usize,
}

impl Default for ToyBackbone {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl ToyBackbone {
    pub fn new(grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidInput("grid must be positive".into()));
        }
        Ok(Self { grid })
    }

    fn keys(&self, image: &Image) -> Result<Vec<[f64; 3]>> {
        let (h, w, c) = image.dim();
        let g = self.grid;
        if c != 3 || h < g || w < g {
            return Err(Error::shape(format!("(>={g}, >={g}, 3)"), image.dim()));
        }
        let mut keys = vec![[0.0; 3]; g * g];
        let mut mean = [0.0; 3];
        for i in 0..g {
            for j in 0..g {
                let (y0, y1) = (i * h / g, (i + 1) * h / g);
                let (x0, x1) = (j * w / g, (j + 1) * w / g);
                let key = &mut keys[i * g + j];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for k in 0..3 {
                            key[k] += image[[y, x, k]];
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for k in 0..3 {
                    key[k] /= n;
                    mean[k] += key[k] / (g * g) as f64;
                }
            }
        }
        for key in &mut keys {
            for k in 0..3 {
                key[k] -= mean[k];
            }
        }
        Ok(keys)
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> &str {
        "toy-patch-selfsim"
    }

    fn descriptor(&self, image: &Image) -> Result<Vec<f64>> {
        let keys = self.keys(image)?;
        let mut out = Vec::with_capacity(keys.len() * keys.len());
        for a in &keys {
            for b in &keys {
                out.push(cosine(a, b).unwrap_or(0.0));
            }
        }
        Ok(out)
    }
}
