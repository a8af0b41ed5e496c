use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Error reply. `code` is stable and meant for programs; `message` is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    error: Detail<'a>,
}

#[derive(Serialize)]
struct Detail<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn checkpoint_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "checkpoint_not_found", format!("no checkpoint named {id:?}"))
    }

    pub fn checkpoint_incompatible(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "checkpoint_incompatible", message)
    }

    pub fn scenario_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "scenario_not_found", format!("no scenario named {id:?}"))
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id:?}"))
    }

    pub fn session_terminal() -> Self {
        Self::new(StatusCode::CONFLICT, "session_terminal", "session has ended and is read-only")
    }

    pub fn empty_text() -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_text", "message text is empty")
    }

    pub fn invalid_outcome(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_outcome", message)
    }

    pub fn capacity_exceeded(max: usize) -> Self {
        Self::new(StatusCode::TOO_MANY_REQUESTS, "capacity_exceeded", format!("at most {max} active sessions"))
    }

    pub fn backend_failure(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "backend_failure", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body { error: Detail { code: self.code, message: &self.message } };
        (self.status, Json(body)).into_response()
    }
}
