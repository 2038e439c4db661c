//! Configuration types and the TOML configuration file.
//!
//! Every section is optional in the file; missing fields take the defaults
//! documented on each type. `LATEDIT_CONFIG` overrides the path passed on
//! the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::EditorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::prior::mask::MaskConfig;
use crate::schedule::{NoiseSchedule, SHAP_E_EDITOR_SIGMA, SHAP_E_EDITOR_TAU};
use crate::trainer::TrainConfig;

pub const CONFIG_ENV: &str = "LATEDIT_CONFIG";

/// Classifier-free guidance scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma_image: f64,
    pub gamma_text: f64,
    pub gamma_text_t2i: f64,
}

impl GuidanceConfig {
    /// `(gamma_I, gamma_T) = (2.5, 50)`.
    pub const GLOBAL: Self = Self {
        gamma_image: 2.5,
        gamma_text: 50.0,
        gamma_text_t2i: 50.0,
    };
    /// `(gamma_I, gamma_T, gamma'_T) = (2.5, 7.5, 50)`.
    pub const LOCAL: Self = Self {
        gamma_image: 2.5,
        gamma_text: 7.5,
        gamma_text_t2i: 50.0,
    };

    pub fn validate(&self) -> Result<()> {
        non_negative("gamma_image", self.gamma_image)?;
        non_negative("gamma_text", self.gamma_text)?;
        non_negative("gamma_text_t2i", self.gamma_text_t2i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSet {
    pub global: GuidanceConfig,
    pub local: GuidanceConfig,
}

impl Default for GuidanceSet {
    fn default() -> Self {
        Self {
            global: GuidanceConfig::GLOBAL,
            local: GuidanceConfig::LOCAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ti2i: f64,
    pub lambda_t2i: f64,
    pub lambda_photo: f64,
    pub lambda_depth: f64,
    pub lambda_reg_global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ti2i: 1.0,
            lambda_t2i: 1.0,
            lambda_photo: 1.25,
            lambda_depth: 0.8,
            lambda_reg_global: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        non_negative("lambda_ti2i", self.lambda_ti2i)?;
        non_negative("lambda_t2i", self.lambda_t2i)?;
        non_negative("lambda_photo", self.lambda_photo)?;
        non_negative("lambda_depth", self.lambda_depth)?;
        non_negative("lambda_reg_global", self.lambda_reg_global)
    }
}

/// Circular camera track around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_range_deg: [f64; 2],
    pub render_resolution: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            radius: 4.0,
            elevation_deg: 30.0,
            azimuth_range_deg: [-180.0, 180.0],
            render_resolution: 128,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!("camera radius must be > 0 (got {})", self.radius)));
        }
        let [lo, hi] = self.azimuth_range_deg;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad azimuth range [{lo}, {hi}]")));
        }
        if !self.elevation_deg.is_finite() {
            return Err(Error::Config("elevation must be finite".into()));
        }
        if self.render_resolution == 0 {
            return Err(Error::Config("render_resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Cosine schedule; without an offset, the one calibrated to
    /// `sigma_200 = 0.308` is used.
    Cosine { steps: usize, offset: Option<f64> },
    LinearSigma { steps: usize },
    Table { alphas: Vec<f64>, sigmas: Vec<f64> },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Cosine {
            steps: crate::schedule::SHAP_E_STEPS,
            offset: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleConfig::Cosine { steps, offset: Some(o) } => NoiseSchedule::cosine(*steps, *o),
            ScheduleConfig::Cosine { steps, offset: None } => {
                let o = crate::schedule::calibrate_cosine_offset(*steps, SHAP_E_EDITOR_TAU.min(*steps), SHAP_E_EDITOR_SIGMA);
                NoiseSchedule::cosine(*steps, o)
            }
            ScheduleConfig::LinearSigma { steps } => NoiseSchedule::linear_sigma(*steps),
            ScheduleConfig::Table { alphas, sigmas } => NoiseSchedule::from_tables(alphas.clone(), sigmas.clone()),
        }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceSet,
    pub loss: LossWeights,
    pub camera: CameraConfig,
    pub editor: EditorConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Loads from `$LATEDIT_CONFIG` if set, else from `path`, else defaults.
    pub fn load_with_env(path: Option<&Path>) -> Result<Self> {
        match resolve_path(path) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.guidance.global.validate()?;
        self.guidance.local.validate()?;
        self.loss.validate()?;
        self.camera.validate()?;
        self.editor.validate()?;
        self.mask.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Stable hash of the serialized config (hex sha256).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub fn resolve_path(path: Option<&Path>) -> Option<PathBuf> {
    std::env::var_os(CONFIG_ENV)
        .map(PathBuf::from)
        .or_else(|| path.map(Path::to_path_buf))
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and >= 0 (got {v})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = Config::default();
        assert_eq!(c.guidance.global.gamma_image, 2.5);
        assert_eq!(c.guidance.global.gamma_text, 50.0);
        assert_eq!(c.guidance.local.gamma_text, 7.5);
        assert_eq!(c.guidance.local.gamma_text_t2i, 50.0);
        assert_eq!(c.loss.lambda_photo, 1.25);
        assert_eq!(c.loss.lambda_depth, 0.8);
        assert_eq!(c.loss.lambda_reg_global, 5.0);
        assert_eq!(c.camera.radius, 4.0);
        assert_eq!(c.camera.elevation_deg, 30.0);
        assert_eq!(c.camera.azimuth_range_deg, [-180.0, 180.0]);
        assert_eq!(c.camera.render_resolution, 128);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn rejects_unknown_and_negative() {
        assert!(Config::from_toml_str("[loss]\nlambda_bogus = 1.0\n").is_err());
        assert!(Config::from_toml_str("[loss]\nlambda_photo = -1.0\n").is_err());
        assert!(Config::from_toml_str("[camera]\nradius = 0.0\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = Config::from_toml_str("[camera]\nradius = 2.5\n[schedule]\nkind = \"linear_sigma\"\nsteps = 10\n").unwrap();
        assert_eq!(c.camera.radius, 2.5);
        assert_eq!(c.camera.elevation_deg, 30.0);
        assert_eq!(c.schedule.build().unwrap().steps(), 10);
    }

    proptest! {
        #[test]
        fn config_round_trips(
            gi in 0.0f64..100.0, gt in 0.0f64..100.0, g2 in 0.0f64..100.0,
            photo in 0.0f64..10.0, depth in 0.0f64..10.0, reg in 0.0f64..10.0,
            radius in 0.1f64..10.0, el in -90.0f64..90.0, lo in -180.0f64..0.0, hi in 0.0f64..180.0,
            res in 1usize..512, offset in proptest::option::of(0.0f64..0.1),
        ) {
            let mut c = Config::default();
            c.guidance.global = GuidanceConfig { gamma_image: gi, gamma_text: gt, gamma_text_t2i: g2 };
            c.loss.lambda_photo = photo;
            c.loss.lambda_depth = depth;
            c.loss.lambda_reg_global = reg;
            c.camera = CameraConfig { radius, elevation_deg: el, azimuth_range_deg: [lo, hi], render_resolution: res };
            c.schedule = ScheduleConfig::Cosine { steps: 64, offset };
            let text = c.to_toml_string().unwrap();
            prop_assert_eq!(Config::from_toml_str(&text).unwrap(), c);
        }
    }
}
