//! Training gradients at the rendered-image node.
//!
//! Score distillation is injected as a gradient (`eps_hat* - eps`) rather than
//! derived from a scalar loss. Regularizers are means over pixels.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::config::{GuidanceConfig, LossWeights};
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, EditKind};
use crate::prior::{cfg_t2i, cfg_ti2i, EditMask, NoisePrediction, Prior};
use crate::schedule::NoiseSchedule;
use crate::tensor::{DepthMap, Image};

/// Per-timestep multiplier on the score-distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdsWeighting {
    #[default]
    Unit,
    /// `sigma_t / alpha_t`; turns the noise residual into a clean-image residual.
    SigmaOverAlpha,
}

impl SdsWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        let (a, s) = schedule.at(t)?;
        Ok(match self {
            Self::Unit => 1.0,
            Self::SigmaOverAlpha => s / a,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_image: Image,
    pub d_depth: DepthMap,
    /// Enabled loss terms only. Distillation terms report the mean squared gradient.
    pub diagnostics: BTreeMap<String, f64>,
}

impl GradientBundle {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            d_image: Array3::zeros((h, w, 3)),
            d_depth: Array2::zeros((h, w)),
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_image.iter().chain(self.d_depth.iter()).all(|v| v.is_finite())
            && self.diagnostics.values().all(|v| v.is_finite())
    }
}

/// Source and edited renders from one shared viewpoint.
#[derive(Debug, Clone, Copy)]
pub struct ViewPair<'a> {
    pub x_s: &'a Image,
    pub x_e: &'a Image,
    pub d_s: &'a DepthMap,
    pub d_e: &'a DepthMap,
}

impl ViewPair<'_> {
    fn check(&self) -> Result<(usize, usize)> {
        let (h, w, c) = self.x_e.dim();
        if c != 3 || self.x_s.dim() != (h, w, 3) {
            return Err(Error::shape([h, w, 3], self.x_s.shape()));
        }
        if self.d_s.dim() != (h, w) || self.d_e.dim() != (h, w) {
            return Err(Error::shape([h, w], (self.d_s.dim(), self.d_e.dim())));
        }
        Ok((h, w))
    }
}

pub fn sds_grad(eps_star: &NoisePrediction, eps: &Image) -> Result<Image> {
    if eps_star.eps_hat.dim() != eps.dim() {
        return Err(Error::shape(eps.shape(), eps_star.eps_hat.shape()));
    }
    Ok(&eps_star.eps_hat - eps)
}

fn check_depths(d_e: &DepthMap, d_s: &DepthMap) -> Result<()> {
    if d_e.dim() != d_s.dim() {
        return Err(Error::shape(d_s.shape(), d_e.shape()));
    }
    Ok(())
}

pub fn loss_reg_global(d_e: &DepthMap, d_s: &DepthMap) -> Result<f64> {
    check_depths(d_e, d_s)?;
    if d_e.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = Zip::from(d_e).and(d_s).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sum / d_e.len() as f64)
}

/// Gradient of [`loss_reg_global`] w.r.t. `d_e`.
pub fn grad_reg_global(d_e: &DepthMap, d_s: &DepthMap) -> Result<DepthMap> {
    check_depths(d_e, d_s)?;
    let n = d_e.len().max(1) as f64;
    Ok(Zip::from(d_e).and(d_s).map_collect(|&a, &b| 2.0 * (a - b) / n))
}

fn check_local(v: &ViewPair<'_>, mask: &EditMask) -> Result<(usize, usize)> {
    let hw = v.check()?;
    if mask.resolution() != hw {
        return Err(Error::shape(hw, mask.resolution()));
    }
    if !mask.values().iter().all(|&m| (0.0..=1.0).contains(&m)) {
        return Err(Error::InvalidInput("mask entries must lie in [0, 1]".into()));
    }
    Ok(hw)
}

/// `mean_p (1 - m) (l_photo |x_e - x_s|^2 + l_depth (d_e - d_s)^2)`.
pub fn loss_reg_local(v: &ViewPair<'_>, mask: &EditMask, w: &LossWeights) -> Result<f64> {
    let (h, wd) = check_local(v, mask)?;
    let m = mask.values();
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..wd {
            let mut photo = 0.0;
            for c in 0..3 {
                let d = v.x_e[[i, j, c]] - v.x_s[[i, j, c]];
                photo += d * d;
            }
            let dd = v.d_e[[i, j]] - v.d_s[[i, j]];
            sum += (1.0 - m[[i, j]]) * (w.lambda_photo * photo + w.lambda_depth * dd * dd);
        }
    }
    Ok(sum / (h * wd).max(1) as f64)
}

/// Gradients of [`loss_reg_local`] w.r.t. `x_e` and `d_e`.
pub fn grad_reg_local(v: &ViewPair<'_>, mask: &EditMask, w: &LossWeights) -> Result<(Image, DepthMap)> {
    let (h, wd) = check_local(v, mask)?;
    let n = (h * wd).max(1) as f64;
    let m = mask.values();
    let gx = Array3::from_shape_fn((h, wd, 3), |(i, j, c)| {
        (1.0 - m[[i, j]]) * w.lambda_photo * 2.0 * (v.x_e[[i, j, c]] - v.x_s[[i, j, c]]) / n
    });
    let gd = Array2::from_shape_fn((h, wd), |(i, j)| {
        (1.0 - m[[i, j]]) * w.lambda_depth * 2.0 * (v.d_e[[i, j]] - v.d_s[[i, j]]) / n
    });
    Ok((gx, gd))
}

fn mean_sq(a: &Image) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64
    }
}

/// Shared settings for one distillation step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub t: usize,
    /// Noise used to form `x_t` from the edited render.
    pub eps: &'a Image,
    pub guidance: &'a GuidanceConfig,
    pub weights: &'a LossWeights,
    pub weighting: SdsWeighting,
}

pub fn global_edit_gradients(
    ti2i: &dyn Prior,
    views: &ViewPair<'_>,
    instruction: &EditInstruction,
    ctx: &StepContext<'_>,
) -> Result<GradientBundle> {
    if instruction.kind() != EditKind::Global {
        return Err(Error::Instruction(format!("{:?} is not a global edit", instruction.text())));
    }
    let (h, w) = views.check()?;
    let mut bundle = GradientBundle::zeros(h, w);
    let x_t = ctx.schedule.noise(views.x_e, ctx.t, ctx.eps)?;
    let eps_star = cfg_ti2i(ti2i, &x_t, views.x_s, instruction.text(), ctx.t, ctx.guidance)?;
    let g = sds_grad(&eps_star, ctx.eps)?;
    bundle.diagnostics.insert("sds_ti2i".into(), mean_sq(&g));
    let scale = ctx.weights.lambda_ti2i * ctx.weighting.weight(ctx.schedule, ctx.t)?;
    bundle.d_image.scaled_add(scale, &g);
    bundle
        .diagnostics
        .insert("reg_global".into(), loss_reg_global(views.d_e, views.d_s)?);
    bundle
        .d_depth
        .scaled_add(ctx.weights.lambda_reg_global, &grad_reg_global(views.d_e, views.d_s)?);
    Ok(bundle)
}

/// Which local-editing terms are active; the ablation variants switch one off each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTerms {
    pub sds_ti2i: bool,
    pub sds_t2i: bool,
    pub regularizer: bool,
    /// Without a mask the regularizer covers the whole image.
    pub mask: bool,
}

impl Default for LocalTerms {
    fn default() -> Self {
        Self {
            sds_ti2i: true,
            sds_t2i: true,
            regularizer: true,
            mask: true,
        }
    }
}

impl LocalTerms {
    pub fn without_mask() -> Self {
        Self { mask: false, ..Self::default() }
    }
    pub fn without_regularizer() -> Self {
        Self { regularizer: false, ..Self::default() }
    }
    pub fn without_t2i() -> Self {
        Self { sds_t2i: false, ..Self::default() }
    }
    pub fn without_ti2i() -> Self {
        Self { sds_ti2i: false, ..Self::default() }
    }
}

/// Priors consulted by a local edit.
#[derive(Clone, Copy)]
pub struct LocalPriors<'a> {
    pub ti2i: &'a dyn Prior,
    pub t2i: &'a dyn Prior,
}

pub fn local_edit_gradients(
    priors: LocalPriors<'_>,
    views: &ViewPair<'_>,
    instruction: &EditInstruction,
    mask: Option<&EditMask>,
    terms: LocalTerms,
    ctx: &StepContext<'_>,
) -> Result<GradientBundle> {
    let target = match (instruction.kind(), instruction.target_description()) {
        (EditKind::Local, Some(t)) => t,
        _ => {
            return Err(Error::Instruction(format!(
                "{:?} is not a local edit with a target description",
                instruction.text()
            )))
        }
    };
    let (h, w) = views.check()?;
    let mut bundle = GradientBundle::zeros(h, w);
    let weight = ctx.weighting.weight(ctx.schedule, ctx.t)?;
    let needs_sds = terms.sds_ti2i || terms.sds_t2i;
    let x_t = if needs_sds {
        Some(ctx.schedule.noise(views.x_e, ctx.t, ctx.eps)?)
    } else {
        None
    };
    if let (true, Some(x_t)) = (terms.sds_ti2i, &x_t) {
        let e = cfg_ti2i(priors.ti2i, x_t, views.x_s, instruction.text(), ctx.t, ctx.guidance)?;
        let g = sds_grad(&e, ctx.eps)?;
        bundle.diagnostics.insert("sds_ti2i".into(), mean_sq(&g));
        bundle.d_image.scaled_add(ctx.weights.lambda_ti2i * weight, &g);
    }
    if let (true, Some(x_t)) = (terms.sds_t2i, &x_t) {
        // Same t and x_t as the image-conditioned term.
        let e = cfg_t2i(priors.t2i, x_t, target, ctx.t, ctx.guidance)?;
        let g = sds_grad(&e, ctx.eps)?;
        bundle.diagnostics.insert("sds_t2i".into(), mean_sq(&g));
        bundle.d_image.scaled_add(ctx.weights.lambda_t2i * weight, &g);
    }
    if terms.regularizer {
        let zeros;
        let m = if terms.mask {
            mask.ok_or_else(|| Error::Instruction("local edit needs a mask".into()))?
        } else {
            zeros = EditMask::new(Array2::zeros((h, w)))?;
            &zeros
        };
        bundle
            .diagnostics
            .insert("reg_local".into(), loss_reg_local(views, m, ctx.weights)?);
        let (gx, gd) = grad_reg_local(views, m, ctx.weights)?;
        bundle.d_image += &gx;
        bundle.d_depth += &gd;
    }
    Ok(bundle)
}
