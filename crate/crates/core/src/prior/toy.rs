//! Analytic Gaussian priors.
//!
//! If the clean image is distributed as `N(mu, s^2 I)` and `x_t = a x + sig eps`,
//! the MMSE noise estimate is `E[eps | x_t] = sig (x_t - a mu) / (a^2 s^2 + sig^2)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, Zip};

use super::{AttentionStack, Capabilities, NoisePrediction, NoiseQuery, Prior, PriorHandle, PriorKind};
use crate::codec::toy::ToyCodec;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{logit, sigmoid, Image};

/// What the mean function sees for one query.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub image: Option<&'a Image>,
    pub text: Option<&'a str>,
    pub dim: (usize, usize, usize),
}

pub type MeanFn = dyn Fn(&Conditioning<'_>) -> Result<Image> + Send + Sync;
pub type AttentionFn = dyn Fn(&str, &str, usize) -> Result<AttentionStack> + Send + Sync;

#[derive(Clone)]
pub struct GaussianPrior {
    handle: PriorHandle,
    schedule: NoiseSchedule,
    std: f64,
    mean: Arc<MeanFn>,
    attention: Option<Arc<AttentionFn>>,
}

impl std::fmt::Debug for GaussianPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianPrior")
            .field("handle", &self.handle)
            .field("std", &self.std)
            .finish_non_exhaustive()
    }
}

/// `sig (x_t - a mu) / (a^2 s^2 + sig^2)`, zero where the denominator vanishes.
pub fn gaussian_eps(x_t: &Image, mu: &Image, alpha: f64, sigma: f64, std: f64) -> Image {
    let denom = alpha * alpha * std * std + sigma * sigma;
    if denom == 0.0 {
        return Array3::zeros(x_t.dim());
    }
    let mut out = Array3::zeros(x_t.dim());
    Zip::from(&mut out)
        .and(x_t)
        .and(mu)
        .for_each(|o, &x, &m| *o = sigma * (x - alpha * m) / denom);
    out
}

impl GaussianPrior {
    pub fn new(kind: PriorKind, model_id: &str, schedule: NoiseSchedule, std: f64, mean: Arc<MeanFn>) -> Result<Self> {
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::InvalidInput(format!("prior std must be >= 0 (got {std})")));
        }
        let caps = Capabilities {
            image_condition: kind != PriorKind::T2i,
            attention_maps: false,
        };
        Ok(Self {
            handle: PriorHandle::new(kind, model_id, caps)?,
            schedule,
            std,
            mean,
            attention: None,
        })
    }

    /// Unconditional `N(mu, s^2 I)`; conditions are accepted and ignored.
    pub fn constant(schedule: NoiseSchedule, mu: Image, std: f64) -> Result<Self> {
        let mean: Arc<MeanFn> = Arc::new(move |c: &Conditioning<'_>| {
            if c.dim != mu.dim() {
                return Err(Error::shape(mu.shape(), [c.dim.0, c.dim.1, c.dim.2]));
            }
            Ok(mu.clone())
        });
        Self::new(PriorKind::Toy, "toy-gaussian", schedule, std, mean)
    }

    pub fn with_attention(mut self, attention: Arc<AttentionFn>) -> Self {
        self.attention = Some(attention);
        self.handle.capabilities.attention_maps = true;
        self
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn mean(&self, cond: &Conditioning<'_>) -> Result<Image> {
        (self.mean)(cond)
    }
}

impl Prior for GaussianPrior {
    fn handle(&self) -> &PriorHandle {
        &self.handle
    }

    fn predict_noise_unchecked(&self, q: &NoiseQuery<'_>) -> Result<NoisePrediction> {
        let (alpha, sigma) = self.schedule.at(q.t)?;
        let cond = Conditioning {
            image: q.image_cond,
            text: q.text,
            dim: q.x_t.dim(),
        };
        let mu = self.mean(&cond)?;
        if mu.dim() != q.x_t.dim() {
            return Err(Error::shape(q.x_t.shape(), mu.shape()));
        }
        Ok(NoisePrediction {
            eps_hat: gaussian_eps(q.x_t, &mu, alpha, sigma, self.std),
            t: q.t,
        })
    }

    fn attention_maps(
        &self,
        _x_t: &Image,
        _image_cond: Option<&Image>,
        text: &str,
        token: &str,
        t: usize,
    ) -> Result<AttentionStack> {
        match &self.attention {
            Some(f) => f(text, token, t),
            None => Err(Error::Capability(format!("{} does not expose attention maps", self.handle.model_id))),
        }
    }
}

/// Image-conditioned prior for the synthetic "+c" task.
///
/// Each instruction maps to a color offset applied to the blob at the origin.
/// The conditional mean for `(x_s, y)` is what rendering `r_s + c` would give:
/// `sigmoid(logit(x_s) + footprint * c)`. Dropping the instruction gives `x_s`,
/// and dropping both gives the background. Attention for any token that occurs
/// in the instruction is the origin footprint at feature resolution.
pub struct ShiftTaskPrior;

impl ShiftTaskPrior {
    pub fn build(
        codec: &ToyCodec,
        schedule: NoiseSchedule,
        shifts: BTreeMap<String, [f64; 3]>,
        std: f64,
        feature_resolution: usize,
    ) -> Result<GaussianPrior> {
        let background = codec.config().background;
        let codec = codec.clone();
        let footprints = Arc::new(std::sync::Mutex::new(BTreeMap::<usize, Array2<f64>>::new()));
        let fp_for = {
            move |res: usize| -> Array2<f64> {
                let mut cache = footprints.lock().unwrap_or_else(|e| e.into_inner());
                cache.entry(res).or_insert_with(|| codec.origin_footprint(res)).clone()
            }
        };
        let fp_for = Arc::new(fp_for);
        let shifts = Arc::new(shifts);
        let mean_shifts = shifts.clone();
        let mean_fp = fp_for.clone();
        let mean: Arc<MeanFn> = Arc::new(move |c: &Conditioning<'_>| {
            let (h, w, ch) = c.dim;
            if h != w || ch != 3 {
                return Err(Error::shape("square RGB image", [h, w, ch]));
            }
            let base: Image = match c.image {
                Some(img) => img.clone(),
                None => Array3::from_shape_fn(c.dim, |(_, _, k)| background[k]),
            };
            let Some(shift) = c.text.and_then(|y| mean_shifts.get(y)) else {
                return Ok(base);
            };
            let fp = mean_fp(h);
            Ok(Array3::from_shape_fn(c.dim, |(i, j, k)| {
                let p = base[[i, j, k]].clamp(1e-9, 1.0 - 1e-9);
                sigmoid(logit(p) + fp[[i, j]] * shift[k])
            }))
        });
        let prior = GaussianPrior::new(PriorKind::Ti2i, "toy-shift", schedule, std, mean)?;
        let attention: Arc<AttentionFn> = Arc::new(move |text: &str, _token: &str, t: usize| {
            let fp = fp_for(feature_resolution);
            let strength = if shifts.contains_key(text) { 1.0 } else { 0.0 };
            // Two "heads" with different scales; normalization makes them agree.
            AttentionStack::new(vec![fp.mapv(|v| v * strength), fp.mapv(|v| 0.5 * v * strength)], t, feature_resolution)
        });
        Ok(prior.with_attention(attention))
    }
}
