//! Asset codecs: encoder `h`, decoder `h*` and the differentiable renderer.

pub mod plugin;
pub mod toy;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::CameraConfig;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::tensor::{DepthMap, Image};

pub use toy::{ToyCodec, ToyCodecConfig};

/// Point cloud with per-point RGB.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.colors.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions but {} colors",
                self.positions.len(),
                self.colors.len()
            )));
        }
        let finite = self
            .positions
            .iter()
            .chain(&self.colors)
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidInput("point cloud has non-finite values".into()));
        }
        Ok(())
    }
}

/// A source 3D object as handed to an encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssetSource {
    pub points: Option<PointCloud>,
    pub views: Vec<(Viewpoint, Image)>,
    pub class_label: String,
    pub instance_id: String,
}

impl AssetSource {
    pub fn from_points(points: PointCloud, class_label: impl Into<String>, instance_id: impl Into<String>) -> Self {
        Self {
            points: Some(points),
            views: Vec::new(),
            class_label: class_label.into(),
            instance_id: instance_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

/// Orthonormal camera frame for a viewpoint looking at the origin.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
}

impl Viewpoint {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Self {
        Self {
            azimuth_deg,
            elevation_deg,
            radius,
        }
    }

    pub fn frame(&self) -> CameraFrame {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        let position = [
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * az.cos(),
        ];
        let forward = [
            -el.cos() * az.sin(),
            -el.sin(),
            -el.cos() * az.cos(),
        ];
        // right = forward x world_up, normalized; world up is +y.
        let right = [-forward[2], 0.0, forward[0]];
        let rn = (right[0] * right[0] + right[2] * right[2]).sqrt();
        let right = if rn > 1e-12 {
            [right[0] / rn, 0.0, right[2] / rn]
        } else {
            [az.cos(), 0.0, -az.sin()]
        };
        let up = [
            right[1] * forward[2] - right[2] * forward[1],
            right[2] * forward[0] - right[0] * forward[2],
            right[0] * forward[1] - right[1] * forward[0],
        ];
        CameraFrame {
            position,
            forward,
            right,
            up,
        }
    }
}

/// RGB + depth render of a field from one viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Image,
    pub depth: DepthMap,
    pub viewpoint: Viewpoint,
}

impl RenderedView {
    pub fn resolution(&self) -> (usize, usize) {
        self.depth.dim()
    }
}

/// Decoded field parameters. Only the codec that produced a field can render it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub decoder_id: String,
    pub(crate) repr: FieldRepr,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum FieldRepr {
    Toy(toy::ToyField),
    /// Field held on the far side of a plugin process; rendering re-sends the latent.
    Remote(Latent),
}

pub trait Codec: Send + Sync {
    fn id(&self) -> &str;
    fn latent_shape(&self) -> (usize, usize);
    fn encode(&self, asset: &AssetSource) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<FieldModel>;
    fn render(&self, field: &FieldModel, viewpoint: &Viewpoint, resolution: usize) -> Result<RenderedView>;

    /// Whether concurrent `encode` calls are allowed on one instance.
    fn concurrent_encode(&self) -> bool {
        false
    }

    fn decode_and_render(&self, latent: &Latent, viewpoint: &Viewpoint, resolution: usize) -> Result<RenderedView> {
        let field = self.decode(latent)?;
        self.render(&field, viewpoint, resolution)
    }
}

/// A codec whose `render . decode` has a vector-Jacobian product w.r.t. the latent.
pub trait DifferentiableCodec: Codec {
    fn render_vjp(
        &self,
        latent: &Latent,
        viewpoint: &Viewpoint,
        resolution: usize,
        d_rgb: &Image,
        d_depth: &DepthMap,
    ) -> Result<Array2<f64>>;
}

/// Draws a viewpoint on the configured circular track.
pub fn sample_viewpoint(rng: &mut impl Rng, cam: &CameraConfig) -> Viewpoint {
    let [lo, hi] = cam.azimuth_range_deg;
    let azimuth = if hi > lo { rng.random_range(lo..hi) } else { lo };
    Viewpoint::new(azimuth, cam.elevation_deg, cam.radius)
}

/// `n` equally spaced azimuths over the configured range.
pub fn uniform_viewpoints(cam: &CameraConfig, n: usize) -> Vec<Viewpoint> {
    let [lo, hi] = cam.azimuth_range_deg;
    (0..n)
        .map(|i| {
            let az = lo + (hi - lo) * i as f64 / n.max(1) as f64;
            Viewpoint::new(az, cam.elevation_deg, cam.radius)
        })
        .collect()
}
