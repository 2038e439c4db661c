//! Out-of-process codec adapter (e.g. a pretrained Shap-E encoder/decoder).

use ndarray::{Array2, Ix2, Ix3};
use serde::Deserialize;
use serde_json::json;

use super::{AssetSource, Codec, DifferentiableCodec, FieldModel, FieldRepr, RenderedView, Viewpoint};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::plugin::{PluginClient, PluginSpec, WireTensor};
use crate::tensor::{DepthMap, Image};

#[derive(Debug, Deserialize)]
struct Describe {
    codec_id: String,
    latent_shape: (usize, usize),
    #[serde(default)]
    concurrent: bool,
}

#[derive(Debug, Deserialize)]
struct RenderReply {
    rgb: WireTensor,
    depth: WireTensor,
}

#[derive(Debug)]
pub struct PluginCodec {
    client: PluginClient,
    id: String,
    shape: (usize, usize),
    concurrent: bool,
}

impl PluginCodec {
    pub fn spawn(spec: &PluginSpec) -> Result<Self> {
        Self::connect(PluginClient::spawn(spec)?)
    }

    pub fn connect(client: PluginClient) -> Result<Self> {
        let d: Describe = client.call_as("describe", json!({}))?;
        Ok(Self {
            client,
            id: d.codec_id,
            shape: d.latent_shape,
            concurrent: d.concurrent,
        })
    }

    fn latent_params(latent: &Latent) -> serde_json::Value {
        json!({ "codec_id": latent.codec_id(), "latent": WireTensor::encode(latent.data()) })
    }
}

impl Codec for PluginCodec {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn concurrent_encode(&self) -> bool {
        self.concurrent
    }

    fn encode(&self, asset: &AssetSource) -> Result<Latent> {
        let points = asset
            .points
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("adapter encode needs a point cloud".into()))?;
        points.validate()?;
        if points.is_empty() {
            return Err(Error::InvalidInput("empty point cloud".into()));
        }
        let views: Vec<_> = asset
            .views
            .iter()
            .map(|(v, img)| json!({ "viewpoint": v, "image": WireTensor::encode(img) }))
            .collect();
        let reply: WireTensor = self.client.call_as(
            "encode",
            json!({ "points": points, "views": views, "class_label": asset.class_label }),
        )?;
        let data = reply.decode_dim::<Ix2>()?;
        let latent = Latent::new(data, self.id.clone())?;
        latent.check_shape(self.shape)?;
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<FieldModel> {
        latent.check_shape(self.shape)?;
        Ok(FieldModel {
            decoder_id: self.id.clone(),
            repr: FieldRepr::Remote(latent.clone()),
        })
    }

    fn render(&self, field: &FieldModel, viewpoint: &Viewpoint, resolution: usize) -> Result<RenderedView> {
        if resolution == 0 {
            return Err(Error::InvalidInput("resolution must be positive".into()));
        }
        let FieldRepr::Remote(latent) = &field.repr else {
            return Err(Error::InvalidInput(format!("field from {:?} is not a remote field", field.decoder_id)));
        };
        let mut params = Self::latent_params(latent);
        params["viewpoint"] = json!(viewpoint);
        params["resolution"] = json!(resolution);
        let reply: RenderReply = self.client.call_as("render", params)?;
        let rgb: Image = reply.rgb.decode_dim::<Ix3>()?;
        let depth: DepthMap = reply.depth.decode_dim::<Ix2>()?;
        if rgb.dim() != (resolution, resolution, 3) || depth.dim() != (resolution, resolution) {
            return Err(Error::Backend(format!(
                "adapter rendered {:?}/{:?} for resolution {resolution}",
                rgb.shape(),
                depth.shape()
            )));
        }
        Ok(RenderedView {
            rgb,
            depth,
            viewpoint: *viewpoint,
        })
    }
}

impl DifferentiableCodec for PluginCodec {
    fn render_vjp(
        &self,
        latent: &Latent,
        viewpoint: &Viewpoint,
        resolution: usize,
        d_rgb: &Image,
        d_depth: &DepthMap,
    ) -> Result<Array2<f64>> {
        latent.check_shape(self.shape)?;
        let mut params = Self::latent_params(latent);
        params["viewpoint"] = json!(viewpoint);
        params["resolution"] = json!(resolution);
        params["d_rgb"] = json!(WireTensor::encode(d_rgb));
        params["d_depth"] = json!(WireTensor::encode(d_depth));
        let reply: WireTensor = self.client.call_as("render_vjp", params)?;
        let grad = reply.decode_dim::<Ix2>()?;
        if grad.dim() != self.shape {
            return Err(Error::shape(self.shape, grad.dim()));
        }
        Ok(grad)
    }
}
