//! Analytic toy codec.
//!
//! The latent is a `G x G` grid of cells, one row per cell, with channels
//! `[density, r, g, b]`. Cell `(i, j)` decodes to an isotropic Gaussian blob
//! centered at `(x_i, 0, z_j)` on a lattice in the horizontal plane.
//!
//! Rendering is orthographic:
//! * RGB is emissive and order independent,
//!   `rgb = sigmoid(logit(bg) + sum_k G_k(p) * color_k)`,
//!   where `G_k(p) = exp(-|p - proj(center_k)|^2 / (2 w^2))`.
//! * Depth is alpha composited front to back with
//!   `alpha_k(p) = 1 - exp(-relu(density_k) * G_k(p))`; rays that pass
//!   through everything land on the far plane.
//!
//! Everything is closed form, so gradients can be checked exactly.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AssetSource, Codec, DifferentiableCodec, FieldModel, FieldRepr, PointCloud, RenderedView, Viewpoint};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::tensor::{logit, sigmoid, DepthMap, Image};

pub const TOY_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCodecConfig {
    /// Cells per side.
    pub grid: usize,
    /// Lattice spans `[-h, h]` on x and z.
    pub lattice_half_extent: f64,
    /// Blob standard deviation in world units.
    pub blob_width: f64,
    /// Orthographic image plane spans `[-e, e]` on both axes.
    pub view_half_extent: f64,
    pub background: [f64; 3],
    /// Depth assigned to rays that hit nothing (world units from the camera).
    pub far_plane: f64,
}

impl Default for ToyCodecConfig {
    fn default() -> Self {
        Self {
            grid: 5,
            lattice_half_extent: 0.8,
            blob_width: 0.22,
            view_half_extent: 1.4,
            background: [0.5, 0.5, 0.5],
            far_plane: 8.0,
        }
    }
}

impl ToyCodecConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid > 0
            && self.lattice_half_extent.is_finite()
            && self.lattice_half_extent >= 0.0
            && self.blob_width.is_finite()
            && self.blob_width > 0.0
            && self.view_half_extent.is_finite()
            && self.view_half_extent > 0.0
            && self.far_plane.is_finite()
            && self.far_plane > 0.0
            && self.background.iter().all(|&b| b > 0.0 && b < 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid toy codec config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCodec {
    cfg: ToyCodecConfig,
    id: String,
    centers: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ToyField {
    densities: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

/// Per-pixel blob footprints and depths for one view.
struct Footprints {
    /// `[k, i, j]`
    weights: Array3<f64>,
    /// Distance along the view direction from the camera to each blob center.
    depths: Vec<f64>,
    /// Blob indices sorted front to back.
    order: Vec<usize>,
}

impl ToyCodec {
    pub fn new(cfg: ToyCodecConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid;
        let coord = |i: usize| {
            if g == 1 {
                0.0
            } else {
                -cfg.lattice_half_extent + 2.0 * cfg.lattice_half_extent * i as f64 / (g - 1) as f64
            }
        };
        let centers = (0..g)
            .flat_map(|i| (0..g).map(move |j| [coord(i), 0.0, coord(j)]))
            .collect();
        Ok(Self {
            id: format!("toy-grid{g}"),
            cfg,
            centers,
        })
    }

    pub fn config(&self) -> &ToyCodecConfig {
        &self.cfg
    }

    pub fn cells(&self) -> usize {
        self.cfg.grid * self.cfg.grid
    }

    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    /// Row index of the cell at the world origin (odd grids only).
    pub fn center_cell(&self) -> Option<usize> {
        let g = self.cfg.grid;
        (g % 2 == 1).then(|| (g / 2) * g + g / 2)
    }

    /// Latent with a single unit-density blob at the origin with the given color channels.
    pub fn unit_blob_latent(&self, color: [f64; 3]) -> Result<Latent> {
        let k = self
            .center_cell()
            .ok_or_else(|| Error::InvalidInput("unit blob needs an odd grid".into()))?;
        let mut data = Array2::zeros(self.latent_shape());
        data[[k, 0]] = 1.0;
        for c in 0..3 {
            data[[k, c + 1]] = color[c];
        }
        Latent::new(data, self.id.clone())
    }

    /// Footprint of a blob at the origin. View independent under orthographic
    /// projection towards the origin.
    pub fn origin_footprint(&self, resolution: usize) -> Array2<f64> {
        let coords = self.pixel_coords(resolution);
        let w2 = 2.0 * self.cfg.blob_width * self.cfg.blob_width;
        Array2::from_shape_fn((resolution, resolution), |(i, j)| {
            let (u, v) = (coords[j], -coords[i]);
            (-(u * u + v * v) / w2).exp()
        })
    }

    /// A point cloud that [`Codec::encode`] maps back to `latent` exactly:
    /// one point per cell at `(x_i, density, z_j)` carrying the raw color channels.
    pub fn decode_as_asset(&self, latent: &Latent, class_label: &str, instance_id: &str) -> Result<AssetSource> {
        latent.check_shape(self.latent_shape())?;
        let data = latent.data();
        let mut cloud = PointCloud::default();
        for (k, c) in self.centers.iter().enumerate() {
            cloud.positions.push([c[0], data[[k, 0]], c[2]]);
            cloud.colors.push([data[[k, 1]], data[[k, 2]], data[[k, 3]]]);
        }
        Ok(AssetSource::from_points(cloud, class_label, instance_id))
    }

    /// Image-plane coordinate of pixel centers along one axis.
    fn pixel_coords(&self, resolution: usize) -> Vec<f64> {
        let e = self.cfg.view_half_extent;
        (0..resolution)
            .map(|i| ((i as f64 + 0.5) / resolution as f64 * 2.0 - 1.0) * e)
            .collect()
    }

    fn nearest_cell(&self, x: f64, z: f64) -> usize {
        let g = self.cfg.grid;
        let h = self.cfg.lattice_half_extent;
        let idx = |v: f64| {
            if g == 1 || h == 0.0 {
                0
            } else {
                let t = (v + h) / (2.0 * h) * (g - 1) as f64;
                t.round().clamp(0.0, (g - 1) as f64) as usize
            }
        };
        idx(x) * g + idx(z)
    }

    fn footprints(&self, viewpoint: &Viewpoint, resolution: usize) -> Footprints {
        let frame = viewpoint.frame();
        let coords = self.pixel_coords(resolution);
        let w2 = 2.0 * self.cfg.blob_width * self.cfg.blob_width;
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let n = self.centers.len();
        let mut weights = Array3::zeros((n, resolution, resolution));
        let mut depths = Vec::with_capacity(n);
        for (k, c) in self.centers.iter().enumerate() {
            let pu = dot(c, &frame.right);
            let pv = dot(c, &frame.up);
            depths.push(dot(c, &frame.forward) + viewpoint.radius);
            let gx: Vec<f64> = coords.iter().map(|&u| (-(u - pu) * (u - pu) / w2).exp()).collect();
            for i in 0..resolution {
                let v = -coords[i];
                let gy = (-(v - pv) * (v - pv) / w2).exp();
                for j in 0..resolution {
                    weights[[k, i, j]] = gy * gx[j];
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
        Footprints {
            weights,
            depths,
            order,
        }
    }

    fn field_of(&self, latent: &Latent) -> Result<ToyField> {
        latent.check_shape(self.latent_shape())?;
        let d = latent.data();
        Ok(ToyField {
            densities: (0..self.cells()).map(|k| d[[k, 0]].max(0.0)).collect(),
            colors: (0..self.cells()).map(|k| [d[[k, 1]], d[[k, 2]], d[[k, 3]]]).collect(),
        })
    }

    fn render_field(&self, field: &ToyField, viewpoint: &Viewpoint, resolution: usize) -> RenderedView {
        let fp = self.footprints(viewpoint, resolution);
        let bg: Vec<f64> = self.cfg.background.iter().map(|&b| logit(b)).collect();
        let mut rgb = Image::zeros((resolution, resolution, 3));
        let mut depth = DepthMap::zeros((resolution, resolution));
        for i in 0..resolution {
            for j in 0..resolution {
                for c in 0..3 {
                    let mut pre = bg[c];
                    for (k, col) in field.colors.iter().enumerate() {
                        pre += fp.weights[[k, i, j]] * col[c];
                    }
                    rgb[[i, j, c]] = sigmoid(pre);
                }
                let mut transmittance = 1.0;
                let mut d = 0.0;
                for &k in &fp.order {
                    let a = 1.0 - (-field.densities[k] * fp.weights[[k, i, j]]).exp();
                    d += fp.depths[k] * a * transmittance;
                    transmittance *= 1.0 - a;
                }
                depth[[i, j]] = d + transmittance * self.cfg.far_plane;
            }
        }
        RenderedView {
            rgb,
            depth,
            viewpoint: *viewpoint,
        }
    }
}

impl Codec for ToyCodec {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self) -> (usize, usize) {
        (self.cells(), TOY_CHANNELS)
    }

    fn concurrent_encode(&self) -> bool {
        true
    }

    /// Bins points into their nearest lattice cell; density is the mean point
    /// height and the color channels are the mean raw point colors.
    fn encode(&self, asset: &AssetSource) -> Result<Latent> {
        let cloud = asset
            .points
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("toy codec needs a point cloud".into()))?;
        cloud.validate()?;
        if cloud.is_empty() {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        let mut sums = Array2::<f64>::zeros(self.latent_shape());
        let mut counts = vec![0usize; self.cells()];
        for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
            let k = self.nearest_cell(p[0], p[2]);
            counts[k] += 1;
            sums[[k, 0]] += p[1];
            for ch in 0..3 {
                sums[[k, ch + 1]] += c[ch];
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                sums.row_mut(k).mapv_inplace(|v| v / n as f64);
            }
        }
        Latent::new(sums, self.id.clone())
    }

    fn decode(&self, latent: &Latent) -> Result<FieldModel> {
        Ok(FieldModel {
            decoder_id: self.id.clone(),
            repr: FieldRepr::Toy(self.field_of(latent)?),
        })
    }

    fn render(&self, field: &FieldModel, viewpoint: &Viewpoint, resolution: usize) -> Result<RenderedView> {
        if resolution == 0 {
            return Err(Error::InvalidInput("resolution must be positive".into()));
        }
        match &field.repr {
            FieldRepr::Toy(f) if field.decoder_id == self.id && f.densities.len() == self.cells() => {
                Ok(self.render_field(f, viewpoint, resolution))
            }
            _ => Err(Error::InvalidInput(format!(
                "field from decoder {:?} is not renderable by {}",
                field.decoder_id, self.id
            ))),
        }
    }
}

impl DifferentiableCodec for ToyCodec {
    fn render_vjp(
        &self,
        latent: &Latent,
        viewpoint: &Viewpoint,
        resolution: usize,
        d_rgb: &Image,
        d_depth: &DepthMap,
    ) -> Result<Array2<f64>> {
        if d_rgb.dim() != (resolution, resolution, 3) || d_depth.dim() != (resolution, resolution) {
            return Err(Error::shape(
                (resolution, resolution),
                (d_rgb.shape().to_vec(), d_depth.shape().to_vec()),
            ));
        }
        let field = self.field_of(latent)?;
        let fp = self.footprints(viewpoint, resolution);
        let rendered = self.render_field(&field, viewpoint, resolution);
        let raw = latent.data();
        let n = self.cells();
        let mut grad = Array2::zeros(self.latent_shape());
        let mut d_density = vec![0.0; n];
        let mut alphas = vec![0.0; n];
        let mut trans = vec![0.0; n];
        for i in 0..resolution {
            for j in 0..resolution {
                for c in 0..3 {
                    let s = rendered.rgb[[i, j, c]];
                    let g_pre = d_rgb[[i, j, c]] * s * (1.0 - s);
                    if g_pre != 0.0 {
                        for k in 0..n {
                            grad[[k, c + 1]] += g_pre * fp.weights[[k, i, j]];
                        }
                    }
                }
                let gd = d_depth[[i, j]];
                if gd == 0.0 {
                    continue;
                }
                let mut t = 1.0;
                for (slot, &k) in fp.order.iter().enumerate() {
                    alphas[slot] = 1.0 - (-field.densities[k] * fp.weights[[k, i, j]]).exp();
                    trans[slot] = t;
                    t *= 1.0 - alphas[slot];
                }
                // Suffix value V_k = depth from slot k onward divided by T_k.
                let mut suffix = self.cfg.far_plane;
                for slot in (0..n).rev() {
                    let k = fp.order[slot];
                    let w = fp.weights[[k, i, j]];
                    let d_alpha = trans[slot] * (fp.depths[k] - suffix);
                    d_density[k] += gd * d_alpha * w * (-field.densities[k] * w).exp();
                    suffix = fp.depths[k] * alphas[slot] + (1.0 - alphas[slot]) * suffix;
                }
            }
        }
        for k in 0..n {
            if raw[[k, 0]] > 0.0 {
                grad[[k, 0]] = d_density[k];
            }
        }
        Ok(grad)
    }
}
