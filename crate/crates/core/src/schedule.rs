//! Variance-preserving noise schedules, `x_t = alpha_t * x + sigma_t * eps`.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest signal coefficient a generated schedule may reach at `t = T`.
const ALPHA_FLOOR: f64 = 1e-4;

/// Step count of the released Shap-E diffusion models.
pub const SHAP_E_STEPS: usize = 1024;
/// Editor noise level: `sigma_200 = 0.308` on the Shap-E timeline.
pub const SHAP_E_EDITOR_TAU: usize = 200;
pub const SHAP_E_EDITOR_SIGMA: f64 = 0.308;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Tag describing which coefficient multiplies which term.
    pub const CONVENTION: &'static str = "signal-times-alpha";

    pub fn from_tables(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.len() != sigmas.len() || alphas.len() < 2 {
            return Err(Error::Config(format!(
                "schedule tables need equal lengths >= 2 (got {} and {})",
                alphas.len(),
                sigmas.len()
            )));
        }
        if alphas[0] != 1.0 || sigmas[0] != 0.0 {
            return Err(Error::Config("schedule must start at alpha=1, sigma=0".into()));
        }
        for (i, (&a, &s)) in alphas.iter().zip(&sigmas).enumerate() {
            if !(a.is_finite() && a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha[{i}] = {a} outside (0, 1]")));
            }
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("sigma[{i}] = {s} negative or non-finite")));
            }
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("alphas must be non-increasing".into()));
        }
        if sigmas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("sigmas must be non-decreasing".into()));
        }
        Ok(Self { alphas, sigmas })
    }

    /// Cosine schedule with the usual `(t/T + s) / (1 + s)` offset, normalized
    /// so that step 0 is exactly noise-free.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 || !(offset.is_finite() && offset >= 0.0) {
            return Err(Error::Config(format!("bad cosine schedule ({steps}, {offset})")));
        }
        let (alphas, sigmas) = (0..=steps)
            .map(|t| cosine_coefficients(steps, offset, t))
            .unzip();
        Self::from_tables(alphas, sigmas)
    }

    /// Cosine schedule over 1024 steps whose offset is calibrated so the
    /// editor noise level lands on `sigma_200 = 0.308`.
    pub fn shap_e_compatible() -> Self {
        let offset = calibrate_cosine_offset(SHAP_E_STEPS, SHAP_E_EDITOR_TAU, SHAP_E_EDITOR_SIGMA);
        Self::cosine(SHAP_E_STEPS, offset).expect("calibrated offset is valid")
    }

    /// `sigma_t = t / T`, `alpha_t = sqrt(1 - sigma_t^2)` floored away from zero.
    pub fn linear_sigma(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("linear schedule needs at least one step".into()));
        }
        let sigmas: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        let alphas = sigmas
            .iter()
            .map(|s| (1.0 - s * s).sqrt().max(ALPHA_FLOOR))
            .collect();
        Self::from_tables(alphas, sigmas)
    }

    /// Number of steps `T`; valid indices are `0..=T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        match (self.alphas.get(t), self.sigmas.get(t)) {
            (Some(&a), Some(&s)) => Ok((a, s)),
            _ => Err(Error::Index {
                index: t,
                len: self.alphas.len(),
            }),
        }
    }

    /// `alpha_t * x + sigma_t * eps`.
    pub fn noise<D: Dimension>(&self, x: &Array<f64, D>, t: usize, eps: &Array<f64, D>) -> Result<Array<f64, D>> {
        if x.shape() != eps.shape() {
            return Err(Error::shape(x.shape(), eps.shape()));
        }
        let (a, s) = self.at(t)?;
        let mut out = x * a;
        out.scaled_add(s, eps);
        Ok(out)
    }

    /// Integer step bounds for a fractional range such as `[0.02, 0.98]`.
    pub fn step_range(&self, lo_frac: f64, hi_frac: f64) -> (usize, usize) {
        let t = self.steps() as f64;
        let lo = (lo_frac * t).round().max(0.0) as usize;
        let hi = ((hi_frac * t).round() as usize).clamp(lo, self.steps());
        (lo, hi)
    }
}

/// Free-function form of [`NoiseSchedule::at`].
pub fn schedule_at(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.at(t)
}

/// Free-function form of [`NoiseSchedule::noise`].
pub fn noise_sample<D: Dimension>(
    x: &Array<f64, D>,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    schedule.noise(x, t, eps)
}

fn cosine_coefficients(steps: usize, offset: f64, t: usize) -> (f64, f64) {
    let f = |u: usize| {
        let phase = (u as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        phase.cos().powi(2)
    };
    let ratio = (f(t) / f(0)).clamp(ALPHA_FLOOR * ALPHA_FLOOR, 1.0);
    (ratio.sqrt(), (1.0 - ratio).sqrt())
}

/// Finds the cosine offset for which `sigma_t` equals `target_sigma`.
pub fn calibrate_cosine_offset(steps: usize, t: usize, target_sigma: f64) -> f64 {
    // sigma_t increases with the offset on [0, 0.5].
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cosine_coefficients(steps, mid, t).1 < target_sigma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
