//! One distillation sample: render a shared view, form the kind-specific
//! gradient bundle and pull it back to the edited latent.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use super::sample_timestep;
use crate::codec::{sample_viewpoint, DifferentiableCodec};
use crate::config::Config;
use crate::distill::{global_edit_gradients, local_edit_gradients, LocalPriors, LocalTerms, SdsWeighting, StepContext, ViewPair};
use crate::error::{Error, Result};
use crate::latent::{EditInstruction, EditKind, Latent};
use crate::prior::{extract_edit_mask, MaskConfig, Prior};
use crate::rng::gaussian3;
use crate::schedule::NoiseSchedule;

pub const PRIOR_NOT_CONFIGURED: &str = "prior not configured";

/// Diffusion priors used during training. Only the ones needed by the
/// instruction kinds in the dataset must be present.
#[derive(Clone, Copy, Default)]
pub struct Priors<'a> {
    pub global_ti2i: Option<&'a dyn Prior>,
    pub local_ti2i: Option<&'a dyn Prior>,
    pub t2i: Option<&'a dyn Prior>,
}

impl<'a> Priors<'a> {
    pub fn global(prior: &'a dyn Prior) -> Self {
        Self {
            global_ti2i: Some(prior),
            ..Self::default()
        }
    }

    fn need(p: Option<&'a dyn Prior>, what: &str) -> Result<&'a dyn Prior> {
        p.ok_or_else(|| Error::Capability(format!("{PRIOR_NOT_CONFIGURED}: {what}")))
    }

    pub(crate) fn check_for(&self, kind: EditKind) -> Result<()> {
        match kind {
            EditKind::Global => Self::need(self.global_ti2i, "global TI2I").map(|_| ()),
            EditKind::Local => {
                Self::need(self.local_ti2i, "local TI2I")?;
                Self::need(self.t2i, "T2I").map(|_| ())
            }
        }
    }

    pub(crate) fn all_concurrent(&self) -> bool {
        [self.global_ti2i, self.local_ti2i, self.t2i]
            .into_iter()
            .flatten()
            .all(|p| p.concurrent())
    }
}

pub(crate) struct StepSettings<'a> {
    pub config: &'a Config,
    pub schedule: &'a NoiseSchedule,
    pub t_hi: f64,
    pub lambda_photo: f64,
    pub terms: LocalTerms,
    pub weighting: SdsWeighting,
}

pub(crate) struct SampleGradient {
    pub d_latent: Array2<f64>,
    pub diagnostics: BTreeMap<String, f64>,
    pub t: usize,
}

/// Gradient of the kind-appropriate objective w.r.t. the edited latent.
pub(crate) fn sample_gradient(
    s: &StepSettings<'_>,
    priors: &Priors<'_>,
    codec: &dyn DifferentiableCodec,
    instruction: &EditInstruction,
    class_label: &str,
    r_s: &Latent,
    r_e: &Latent,
    rng: &mut impl Rng,
) -> Result<SampleGradient> {
    let cam = &s.config.camera;
    let res = cam.render_resolution;
    let viewpoint = sample_viewpoint(rng, cam);
    let src = codec.decode_and_render(r_s, &viewpoint, res)?;
    let edt = codec.decode_and_render(r_e, &viewpoint, res)?;
    let t = sample_timestep(rng, s.schedule, s.config.train.t_range[0], s.t_hi);
    let eps = gaussian3(rng, res, res, 3);
    let mut weights = s.config.loss;
    weights.lambda_photo = s.lambda_photo;
    let views = ViewPair {
        x_s: &src.rgb,
        x_e: &edt.rgb,
        d_s: &src.depth,
        d_e: &edt.depth,
    };
    let (guidance, kind) = match instruction.kind() {
        EditKind::Global => (&s.config.guidance.global, EditKind::Global),
        EditKind::Local => (&s.config.guidance.local, EditKind::Local),
    };
    let ctx = StepContext {
        schedule: s.schedule,
        t,
        eps: &eps,
        guidance,
        weights: &weights,
        weighting: s.weighting,
    };
    let bundle = match kind {
        EditKind::Global => {
            let prior = Priors::need(priors.global_ti2i, "global TI2I")?;
            global_edit_gradients(prior, &views, instruction, &ctx)?
        }
        EditKind::Local => {
            let ti2i = Priors::need(priors.local_ti2i, "local TI2I")?;
            let t2i = Priors::need(priors.t2i, "T2I")?;
            let target = instruction.target_for_class(class_label).unwrap_or_default();
            let token = instruction.attention_token().unwrap_or_default();
            let concrete = EditInstruction::local(instruction.text(), target, token)?;
            let mask = if s.terms.regularizer && s.terms.mask {
                let mcfg = MaskConfig {
                    out_resolution: res,
                    ..s.config.mask.clone()
                };
                Some(extract_edit_mask(ti2i, &src.rgb, instruction.text(), token, &mcfg)?)
            } else {
                None
            };
            local_edit_gradients(LocalPriors { ti2i, t2i }, &views, &concrete, mask.as_ref(), s.terms, &ctx)?
        }
    };
    let d_latent = codec.render_vjp(r_e, &viewpoint, res, &bundle.d_image, &bundle.d_depth)?;
    Ok(SampleGradient {
        d_latent,
        diagnostics: bundle.diagnostics,
        t,
    })
}
