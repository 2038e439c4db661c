//! `/v1` HTTP routes.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use base64::Engine;
use latedit_core::geometry::GeometryFormat;
use latedit_core::plugin::WireTensor;
use latedit_core::{EditInstruction, Latent};
use ndarray::Ix2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::session::{EditSession, Service, SessionSource, TurntableSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetUpload {
    /// `ply` or `obj`; sniffed from the bytes when absent.
    #[serde(default)]
    pub format: Option<String>,
    /// Base64 file contents.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub latent: Option<WireTensor>,
    #[serde(default)]
    pub codec_id: Option<String>,
    #[serde(default)]
    pub asset: Option<AssetUpload>,
    #[serde(default)]
    pub class_label: Option<String>,
    #[serde(default)]
    pub text_prompt: Option<String>,
}

impl CreateSessionRequest {
    pub fn parse(body: &[u8]) -> Result<Self> {
        if body.iter().all(u8::is_ascii_whitespace) {
            return Err(ServiceError::Validation("request body is empty".into()));
        }
        serde_json::from_slice(body).map_err(|e| ServiceError::Validation(format!("bad request body: {e}")))
    }

    /// Checks that exactly one source is given and decodes it.
    pub fn into_source(self, default_codec: &str) -> Result<SessionSource> {
        let given = [self.latent.is_some(), self.asset.is_some(), self.text_prompt.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(ServiceError::Validation(
                "give exactly one of latent, asset or text_prompt".into(),
            ));
        }
        if let Some(t) = self.latent {
            let data = t.decode_dim::<Ix2>()?;
            let codec = self.codec_id.unwrap_or_else(|| default_codec.to_string());
            return Ok(SessionSource::Latent(Latent::new(data, codec)?));
        }
        if let Some(a) = self.asset {
            let format = match a.format.as_deref().map(str::to_ascii_lowercase).as_deref() {
                None => None,
                Some("ply") => Some(GeometryFormat::Ply),
                Some("obj") => Some(GeometryFormat::Obj),
                Some(other) => return Err(ServiceError::Validation(format!("unsupported asset format {other:?}"))),
            };
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(a.data.as_bytes())
                .map_err(|e| ServiceError::Validation(format!("asset data is not base64: {e}")))?;
            return Ok(SessionSource::Asset {
                format,
                bytes,
                class_label: self.class_label.unwrap_or_default(),
            });
        }
        Ok(SessionSource::Text(self.text_prompt.unwrap_or_default()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub instruction: String,
    #[serde(default = "one")]
    pub eta: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthRequest {
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct TurntableQuery {
    pub frames: Option<usize>,
    pub res: Option<usize>,
    /// Number of stack entries applied (0 renders the base). Defaults to the head.
    pub stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryView {
    pub index: usize,
    pub instruction: String,
    pub eta: f64,
    pub latent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub codec_id: String,
    pub base: String,
    pub head: String,
    pub stack: Vec<EntryView>,
    pub head_latent: WireTensor,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayView {
    pub head: String,
    pub replayed: String,
    pub matches: bool,
}

fn view(service: &Service, s: &EditSession) -> Result<SessionView> {
    let head = service.latent(s.head())?;
    Ok(SessionView {
        session_id: s.id.clone(),
        codec_id: s.codec_id.clone(),
        base: s.base.clone(),
        head: s.head().to_string(),
        stack: s
            .stack
            .iter()
            .enumerate()
            .map(|(index, e)| EntryView {
                index,
                instruction: e.instruction.clone(),
                eta: e.eta,
                latent: e.latent.clone(),
            })
            .collect(),
        head_latent: WireTensor::encode(head.data()),
        created_ms: s.created_ms,
        updated_ms: s.updated_ms,
    })
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ServiceError::Validation("request body is empty".into()));
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::Validation(format!("bad request body: {e}")))
}

type Shared = Arc<Service>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

async fn healthz(State(svc): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "editor": svc.editor().architecture(),
        "codec": svc.codec().id(),
        "weights": svc.editor().weights_hash(),
    }))
}

async fn instructions(State(svc): State<Shared>) -> Result<Json<Vec<EditInstruction>>> {
    Ok(Json(svc.instructions()?.to_vec()))
}

async fn create_session(State(svc): State<Shared>, body: Bytes) -> Result<Response> {
    let req = CreateSessionRequest::parse(&body)?;
    let v = blocking(move || {
        let source = req.into_source(svc.codec().id())?;
        let s = svc.create_session(source)?;
        view(&svc, &s)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionView>> {
    blocking(move || view(&svc, &svc.get_session(&id)?)).await.map(Json)
}

async fn apply_edit(State(svc): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<SessionView>> {
    let req: EditRequest = parse_body(&body)?;
    blocking(move || view(&svc, &svc.apply_edit(&id, &req.instruction, req.eta)?))
        .await
        .map(Json)
}

async fn set_strength(
    State(svc): State<Shared>,
    Path((id, k)): Path<(String, usize)>,
    body: Bytes,
) -> Result<Json<SessionView>> {
    let req: StrengthRequest = parse_body(&body)?;
    blocking(move || view(&svc, &svc.set_strength(&id, k, req.eta)?))
        .await
        .map(Json)
}

async fn replay(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Json<ReplayView>> {
    blocking(move || {
        let s = svc.get_session(&id)?;
        let replayed = crate::store::latent_hash(&svc.replay(&id)?)?;
        Ok(ReplayView {
            matches: replayed == s.head(),
            head: s.head().to_string(),
            replayed,
        })
    })
    .await
    .map(Json)
}

async fn turntable(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<TurntableQuery>,
) -> Result<Response> {
    let defaults = svc.turntable_defaults();
    let settings = TurntableSettings {
        frames: q.frames.unwrap_or(defaults.frames),
        resolution: q.res.unwrap_or(defaults.resolution),
    };
    let t = blocking(move || svc.turntable(&id, q.stage, settings)).await?;
    let mut resp = (StatusCode::OK, t.png.as_ref().clone()).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert("x-frames", HeaderValue::from(t.frames));
    h.insert("x-resolution", HeaderValue::from(t.resolution));
    Ok(resp)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/instructions", get(instructions))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/edits", post(apply_edit))
        .route("/v1/sessions/{id}/edits/{k}", patch(set_strength))
        .route("/v1/sessions/{id}/replay", post(replay))
        .route("/v1/sessions/{id}/turntable", get(turntable))
        .with_state(service)
}

/// Serves until ctrl-c.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
