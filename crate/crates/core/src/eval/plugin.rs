//! Embedder and backbone served by an adapter process, using the same line
//! protocol as out-of-process priors.

use serde::Deserialize;
use serde_json::json;

use super::metrics::{Backbone, Embedder};
use crate::error::{Error, Result};
use crate::plugin::{PluginClient, PluginSpec, WireTensor};
use crate::tensor::Image;

#[derive(Debug, Deserialize)]
struct Describe {
    model_id: String,
}

fn vector(reply: Vec<f64>) -> Result<Vec<f64>> {
    if reply.is_empty() || reply.iter().any(|v| !v.is_finite()) {
        return Err(Error::Backend("adapter returned an empty or non-finite vector".into()));
    }
    Ok(reply)
}

#[derive(Debug)]
pub struct PluginEmbedder {
    client: PluginClient,
    id: String,
}

impl PluginEmbedder {
    pub fn spawn(spec: &PluginSpec) -> Result<Self> {
        Self::connect(PluginClient::spawn(spec)?)
    }

    pub fn connect(client: PluginClient) -> Result<Self> {
        let d: Describe = client.call_as("describe", json!({}))?;
        Ok(Self { client, id: d.model_id })
    }
}

impl Embedder for PluginEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        vector(self.client.call_as("embed_image", json!({ "image": WireTensor::encode(image) }))?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        vector(self.client.call_as("embed_text", json!({ "text": text }))?)
    }
}

#[derive(Debug)]
pub struct PluginBackbone {
    client: PluginClient,
    id: String,
    layer: usize,
}

impl PluginBackbone {
    pub fn spawn(spec: &PluginSpec, layer: usize) -> Result<Self> {
        Self::connect(PluginClient::spawn(spec)?, layer)
    }

    pub fn connect(client: PluginClient, layer: usize) -> Result<Self> {
        let d: Describe = client.call_as("describe", json!({}))?;
        Ok(Self {
            client,
            id: d.model_id,
            layer,
        })
    }
}

impl Backbone for PluginBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn descriptor(&self, image: &Image) -> Result<Vec<f64>> {
        vector(self.client.call_as(
            "key_self_similarity",
            json!({ "image": WireTensor::encode(image), "layer": self.layer }),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::toy::{ToyBackbone, ToyEmbedder};
    use crate::plugin::testing::serve;
    use ndarray::Ix3;

    #[test]
    fn adapters_forward_to_toy_models() {
        let client = serve("toy-eval", |method, p| {
            let image = || -> Image {
                let t: WireTensor = serde_json::from_value(p["image"].clone()).unwrap();
                t.decode_dim::<Ix3>().unwrap()
            };
            match method {
                "describe" => Ok(json!({"model_id": "toy"})),
                "embed_image" => Ok(json!(ToyEmbedder::default().embed_image(&image()).unwrap())),
                "embed_text" => Ok(json!(ToyEmbedder::default().embed_text(p["text"].as_str().unwrap()).unwrap())),
                "key_self_similarity" => {
                    assert_eq!(p["layer"], 11);
                    Ok(json!(ToyBackbone::default().descriptor(&image()).unwrap()))
                }
                _ => Err(format!("unsupported {method}")),
            }
        });
        let e = PluginEmbedder::connect(client).unwrap();
        let img = Image::from_elem((8, 8, 3), 0.25);
        assert_eq!(e.embed_image(&img).unwrap(), ToyEmbedder::default().embed_image(&img).unwrap());
        assert_eq!(e.embed_text("pink").unwrap(), ToyEmbedder::default().embed_text("pink").unwrap());
    }

    #[test]
    fn empty_vectors_are_backend_errors() {
        let client = serve("bad", |method, _| match method {
            "describe" => Ok(json!({"model_id": "bad"})),
            _ => Ok(json!([])),
        });
        let b = PluginBackbone::connect(client, 11).unwrap();
        assert!(matches!(b.descriptor(&Image::zeros((8, 8, 3))), Err(Error::Backend(_))));
    }
}
