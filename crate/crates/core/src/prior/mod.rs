//! 2D diffusion priors, classifier-free guidance and attention masks.

pub mod mask;
pub mod plugin;
pub mod toy;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::GuidanceConfig;
use crate::error::{Error, Result};
use crate::tensor::Image;

pub use mask::{extract_edit_mask, AttentionStack, EditMask, MaskConfig};
pub use toy::{GaussianPrior, ShiftTaskPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Text-guided image-to-image editor.
    Ti2i,
    /// Text-to-image model.
    T2i,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub image_condition: bool,
    pub attention_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorHandle {
    pub kind: PriorKind,
    pub model_id: String,
    pub capabilities: Capabilities,
}

impl PriorHandle {
    pub fn new(kind: PriorKind, model_id: impl Into<String>, capabilities: Capabilities) -> Result<Self> {
        if kind == PriorKind::Ti2i && !capabilities.image_condition {
            return Err(Error::Capability("a TI2I prior must accept an image condition".into()));
        }
        Ok(Self {
            kind,
            model_id: model_id.into(),
            capabilities,
        })
    }
}

/// Denoiser output at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps_hat: Image,
    pub t: usize,
}

/// One denoiser evaluation request.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a> {
    pub x_t: &'a Image,
    pub image_cond: Option<&'a Image>,
    pub text: Option<&'a str>,
    pub t: usize,
}

pub trait Prior: Send + Sync {
    fn handle(&self) -> &PriorHandle;

    /// One denoiser evaluation. Callers go through [`predict_noise`], which
    /// checks capabilities and the output contract.
    fn predict_noise_unchecked(&self, query: &NoiseQuery<'_>) -> Result<NoisePrediction>;

    /// Several evaluations; backends may batch them into one invocation.
    fn predict_noise_batch(&self, queries: &[NoiseQuery<'_>]) -> Result<Vec<NoisePrediction>> {
        queries.iter().map(|q| self.predict_noise_unchecked(q)).collect()
    }

    fn attention_maps(
        &self,
        _x_t: &Image,
        _image_cond: Option<&Image>,
        _text: &str,
        _token: &str,
        _t: usize,
    ) -> Result<AttentionStack> {
        Err(Error::Capability(format!("{} does not expose attention maps", self.handle().model_id)))
    }

    /// Whether evaluations may run concurrently on this instance.
    fn concurrent(&self) -> bool {
        true
    }
}

fn check_query(handle: &PriorHandle, q: &NoiseQuery<'_>) -> Result<()> {
    if q.image_cond.is_some() && !handle.capabilities.image_condition {
        return Err(Error::Capability(format!("{} does not accept an image condition", handle.model_id)));
    }
    if let Some(c) = q.image_cond {
        if c.dim() != q.x_t.dim() {
            return Err(Error::shape(q.x_t.shape(), c.shape()));
        }
    }
    if !q.x_t.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("x_t has non-finite entries".into()));
    }
    Ok(())
}

fn check_prediction(q: &NoiseQuery<'_>, p: &NoisePrediction) -> Result<()> {
    if p.eps_hat.dim() != q.x_t.dim() {
        return Err(Error::Backend(format!(
            "prediction shape {:?} != input shape {:?}",
            p.eps_hat.shape(),
            q.x_t.shape()
        )));
    }
    if !p.eps_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Backend("prediction has non-finite entries".into()));
    }
    Ok(())
}

pub fn predict_noise(
    prior: &dyn Prior,
    x_t: &Image,
    image_cond: Option<&Image>,
    text: Option<&str>,
    t: usize,
) -> Result<NoisePrediction> {
    let q = NoiseQuery { x_t, image_cond, text, t };
    Ok(predict_batch(prior, &[q])?.remove(0))
}

fn predict_batch(prior: &dyn Prior, queries: &[NoiseQuery<'_>]) -> Result<Vec<NoisePrediction>> {
    for q in queries {
        check_query(prior.handle(), q)?;
    }
    let out = prior.predict_noise_batch(queries)?;
    if out.len() != queries.len() {
        return Err(Error::Backend(format!("{} predictions for {} queries", out.len(), queries.len())));
    }
    for (q, p) in queries.iter().zip(&out) {
        check_prediction(q, p)?;
    }
    Ok(out)
}

/// Three-term guidance for an image-conditioned editor:
/// `e(0,0) + g_I (e(x_s,0) - e(0,0)) + g_T (e(x_s,y) - e(x_s,0))`.
pub fn cfg_ti2i(
    prior: &dyn Prior,
    x_t: &Image,
    x_src: &Image,
    instruction: &str,
    t: usize,
    g: &GuidanceConfig,
) -> Result<NoisePrediction> {
    if !prior.handle().capabilities.image_condition {
        return Err(Error::Capability(format!("{} is not image-conditioned", prior.handle().model_id)));
    }
    let queries = [
        NoiseQuery { x_t, image_cond: None, text: None, t },
        NoiseQuery { x_t, image_cond: Some(x_src), text: None, t },
        NoiseQuery { x_t, image_cond: Some(x_src), text: Some(instruction), t },
    ];
    let [uncond, image, full]: [NoisePrediction; 3] = predict_batch(prior, &queries)?
        .try_into()
        .map_err(|_| Error::Backend("expected three predictions".into()))?;
    let eps = compose_ti2i(&uncond.eps_hat, &image.eps_hat, &full.eps_hat, g);
    Ok(NoisePrediction { eps_hat: eps, t })
}

pub(crate) fn compose_ti2i(uncond: &Image, image: &Image, full: &Image, g: &GuidanceConfig) -> Image {
    let mut out = uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(uncond)
        .and(image)
        .and(full)
        .for_each(|o, &e0, &e1, &e2| {
            *o = e0 + g.gamma_image * (e1 - e0) + g.gamma_text * (e2 - e1);
        });
    out
}

/// Two-term guidance for a text-to-image prior: `e(0) + g'_T (e(y_e) - e(0))`.
pub fn cfg_t2i(
    prior: &dyn Prior,
    x_t: &Image,
    target_description: &str,
    t: usize,
    g: &GuidanceConfig,
) -> Result<NoisePrediction> {
    let queries = [
        NoiseQuery { x_t, image_cond: None, text: None, t },
        NoiseQuery { x_t, image_cond: None, text: Some(target_description), t },
    ];
    let [uncond, cond]: [NoisePrediction; 2] = predict_batch(prior, &queries)?
        .try_into()
        .map_err(|_| Error::Backend("expected two predictions".into()))?;
    let mut eps = uncond.eps_hat.clone();
    ndarray::Zip::from(&mut eps)
        .and(&uncond.eps_hat)
        .and(&cond.eps_hat)
        .for_each(|o, &e0, &e1| *o = e0 + g.gamma_text_t2i * (e1 - e0));
    Ok(NoisePrediction { eps_hat: eps, t })
}

/// Wraps a prior and counts denoiser call-equivalents.
pub struct CountingPrior<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: Prior> CountingPrior<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: Prior> Prior for CountingPrior<P> {
    fn handle(&self) -> &PriorHandle {
        self.inner.handle()
    }

    fn predict_noise_unchecked(&self, query: &NoiseQuery<'_>) -> Result<NoisePrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise_unchecked(query)
    }

    fn predict_noise_batch(&self, queries: &[NoiseQuery<'_>]) -> Result<Vec<NoisePrediction>> {
        self.calls.fetch_add(queries.len(), Ordering::SeqCst);
        self.inner.predict_noise_batch(queries)
    }

    fn attention_maps(
        &self,
        x_t: &Image,
        image_cond: Option<&Image>,
        text: &str,
        token: &str,
        t: usize,
    ) -> Result<AttentionStack> {
        self.inner.attention_maps(x_t, image_cond, text, token, t)
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}
