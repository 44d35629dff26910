use std::net::SocketAddr;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use netcase_core::case::CaseError;
use netcase_core::error::{Coded, ErrorClass};
use netcase_core::ingest::IngestError;
use netcase_core::store::StoreError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("no import {0}")]
    UnknownImport(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        ServiceError::Case(e.into())
    }
}

impl From<IngestError> for ServiceError {
    fn from(e: IngestError) -> Self {
        ServiceError::Case(e.into())
    }
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Case(e) => e.code(),
            ServiceError::InvalidRequest(_) => "InvalidRequest",
            ServiceError::BindFailure { .. } => "BindFailure",
            ServiceError::UnknownImport(_) => "UnknownImport",
            ServiceError::Io(_) => "Io",
            ServiceError::Internal(_) => "Internal",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            ServiceError::Case(e) => e.class(),
            ServiceError::InvalidRequest(_) => ErrorClass::Usage,
            ServiceError::BindFailure { .. } => ErrorClass::Busy,
            ServiceError::UnknownImport(_) => ErrorClass::NotFound,
            ServiceError::Io(_) => ErrorClass::Storage,
            ServiceError::Internal(_) => ErrorClass::Internal,
        }
    }

    pub fn to_api(&self) -> ApiError {
        let detail = match self {
            ServiceError::Case(e) => e.detail(),
            ServiceError::BindFailure { addr, .. } => serde_json::json!({ "addr": addr.to_string() }),
            ServiceError::UnknownImport(id) => serde_json::json!({ "import_id": id }),
            _ => serde_json::Value::Null,
        };
        ApiError {
            status: self.class().http_status(),
            code: self.code(),
            message: self.to_string(),
            detail,
        }
    }
}

/// Error body of every failed request: `{"error": {...}}`.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let api = self.to_api();
        let status = StatusCode::from_u16(api.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, axum::Json(serde_json::json!({ "error": api }))).into_response()
    }
}
