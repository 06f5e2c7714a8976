use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failures while starting the service.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] triadic_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Request failures, sent as `{code, message}`.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("no model snapshot yet; train first")]
    NoSnapshot,
    #[error("{0}")]
    NoPendingBatch(String),
    #[error("{0}")]
    Internal(String),
}

/// Wire form of an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::Invalid(_) => "invalid_request",
            ApiError::Conflict(_) => "conflict",
            ApiError::NoSnapshot => "no_snapshot",
            ApiError::NoPendingBatch(_) => "no_pending_batch",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) | ApiError::NoSnapshot => StatusCode::NOT_FOUND,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) | ApiError::NoPendingBatch(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<triadic_core::Error> for ApiError {
    fn from(e: triadic_core::Error) -> Self {
        use triadic_core::Error as E;
        match e {
            E::UnknownObject(_)
            | E::InvalidParameter(_)
            | E::InvalidObservation(_)
            | E::InvalidBatch(_)
            | E::ModelMismatch(_)
            | E::NoObservations
            | E::EmptyTestSet => ApiError::Invalid(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().into(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
