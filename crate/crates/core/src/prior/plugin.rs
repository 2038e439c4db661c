//! Out-of-process diffusion prior adapter.

use ndarray::{Ix2, Ix3};
use serde::Deserialize;
use serde_json::json;

use super::{AttentionStack, Capabilities, NoisePrediction, NoiseQuery, Prior, PriorHandle, PriorKind};
use crate::error::{Error, Result};
use crate::plugin::{PluginClient, PluginSpec, WireTensor};
use crate::tensor::Image;

#[derive(Debug, Deserialize)]
struct Describe {
    kind: PriorKind,
    model_id: String,
    #[serde(default)]
    capabilities: Capabilities,
    #[serde(default)]
    concurrent: bool,
    #[serde(default)]
    feature_resolution: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct AttentionReply {
    maps: Vec<WireTensor>,
}

#[derive(Debug)]
pub struct PluginPrior {
    client: PluginClient,
    handle: PriorHandle,
    concurrent: bool,
    feature_resolution: usize,
}

impl PluginPrior {
    pub fn spawn(spec: &PluginSpec) -> Result<Self> {
        Self::connect(PluginClient::spawn(spec)?)
    }

    pub fn connect(client: PluginClient) -> Result<Self> {
        let d: Describe = client.call_as("describe", json!({}))?;
        Ok(Self {
            handle: PriorHandle::new(d.kind, d.model_id, d.capabilities)?,
            client,
            concurrent: d.concurrent,
            feature_resolution: d.feature_resolution.unwrap_or(32),
        })
    }
}

fn query_json(q: &NoiseQuery<'_>) -> serde_json::Value {
    json!({
        "x_t": WireTensor::encode(q.x_t),
        "image_cond": q.image_cond.map(WireTensor::encode),
        "text": q.text,
        "t": q.t,
    })
}

impl Prior for PluginPrior {
    fn handle(&self) -> &PriorHandle {
        &self.handle
    }

    fn predict_noise_unchecked(&self, q: &NoiseQuery<'_>) -> Result<NoisePrediction> {
        Ok(self.predict_noise_batch(std::slice::from_ref(q))?.remove(0))
    }

    fn predict_noise_batch(&self, queries: &[NoiseQuery<'_>]) -> Result<Vec<NoisePrediction>> {
        let params = json!({ "queries": queries.iter().map(query_json).collect::<Vec<_>>() });
        let reply: Vec<WireTensor> = self.client.call_as("predict_noise", params)?;
        if reply.len() != queries.len() {
            return Err(Error::Backend(format!("{} replies for {} queries", reply.len(), queries.len())));
        }
        reply
            .iter()
            .zip(queries)
            .map(|(w, q)| {
                Ok(NoisePrediction {
                    eps_hat: w.decode_dim::<Ix3>()?,
                    t: q.t,
                })
            })
            .collect()
    }

    fn attention_maps(
        &self,
        x_t: &Image,
        image_cond: Option<&Image>,
        text: &str,
        token: &str,
        t: usize,
    ) -> Result<AttentionStack> {
        if !self.handle.capabilities.attention_maps {
            return Err(Error::Capability(format!("{} does not expose attention maps", self.handle.model_id)));
        }
        let params = json!({
            "x_t": WireTensor::encode(x_t),
            "image_cond": image_cond.map(WireTensor::encode),
            "text": text,
            "token": token,
            "t": t,
        });
        let reply: AttentionReply = self.client.call_as("attention_maps", params)?;
        let maps = reply
            .maps
            .iter()
            .map(|w| w.decode_dim::<Ix2>())
            .collect::<Result<Vec<_>>>()?;
        AttentionStack::new(maps, t, self.feature_resolution)
    }

    fn concurrent(&self) -> bool {
        self.concurrent
    }
}
