//! Named parameter sets and AdamW.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named 2D parameter arrays. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Init(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::Init(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|((ka, va), (kb, vb))| ka == kb && va.dim() == vb.dim())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::InvalidInput("parameter layouts differ".into()));
        }
        for (a, b) in self.arrays.values_mut().zip(other.arrays.values()) {
            a.scaled_add(scale, b);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn num_values(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.arrays {
            h.update(k.as_bytes());
            h.update([0]);
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn into_inner(self) -> BTreeMap<String, Array2<f64>> {
        self.arrays
    }

    pub fn from_map(arrays: BTreeMap<String, Array2<f64>>) -> Self {
        Self { arrays }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay: `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, like: &ParamSet) -> Self {
        Self {
            cfg,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&ParamSet, &ParamSet) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(cfg: AdamWConfig, step: u64, m: ParamSet, v: ParamSet) -> Result<Self> {
        if !m.same_layout(&v) {
            return Err(Error::Format("optimizer moment layouts differ".into()));
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::InvalidInput("optimizer, parameter and gradient layouts differ".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, g), m), v) in params
            .arrays
            .values_mut()
            .zip(grads.arrays.values())
            .zip(self.m.arrays.values_mut())
            .zip(self.v.arrays.values_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p * decay - c.lr * mh / (vh.sqrt() + c.eps);
            });
        }
        Ok(())
    }
}
