use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),

    #[error("instruction {given:?} is not one of the model's trained prompts")]
    UnknownInstruction { given: String, available: Vec<String> },

    #[error("edit entry {index} out of range (stack has {len})")]
    EntryOutOfRange { index: usize, len: usize },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error(transparent)]
    Core(#[from] latedit_core::Error),
}

impl ServiceError {
    pub(crate) fn storage(e: impl std::fmt::Display) -> Self {
        ServiceError::Storage(e.to_string())
    }

    pub fn status(&self) -> StatusCode {
        use latedit_core::Error as E;
        match self {
            ServiceError::SessionNotFound(_) | ServiceError::EntryOutOfRange { .. } => StatusCode::NOT_FOUND,
            ServiceError::UnknownInstruction { .. } | ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unsupported(_) => StatusCode::NOT_IMPLEMENTED,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::Core(e) => match e {
                E::InvalidInput(_) | E::Shape { .. } | E::Format(_) | E::Instruction(_) | E::Token(_) => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
                E::Index { .. } => StatusCode::NOT_FOUND,
                E::Capability(_) => StatusCode::NOT_IMPLEMENTED,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::UnknownInstruction { available, .. } = &self {
            body["available"] = json!(available);
        }
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(body)).into_response()
    }
}
