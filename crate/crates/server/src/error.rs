//! API error bodies: `{"error": {"code", "message", "fields"}}`.

use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use laps_core::acts::ActError;
use laps_core::extraction::ExtractionError;
use laps_core::guidance::GuidanceError;
use laps_core::orchestrator::OrchestratorError;
use serde::{Deserialize, Serialize};

use crate::auth::AuthFailure;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    pub fn field(field: &str, code: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        let mut e = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation_failed",
            message.clone(),
        );
        e.body.fields.push(FieldError {
            field: field.into(),
            code: code.into(),
            message,
        });
        e
    }

    pub fn not_found(what: &str) -> Self {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }

    pub fn forbidden() -> Self {
        ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "this token may not access the resource",
        )
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<AuthFailure> for ApiError {
    fn from(f: AuthFailure) -> Self {
        let (code, message) = match f {
            AuthFailure::Missing => ("unauthenticated", "missing bearer token"),
            AuthFailure::Unknown => ("unauthenticated", "unknown or revoked token"),
            AuthFailure::Expired => ("token_expired", "token expired"),
        };
        ApiError::new(StatusCode::UNAUTHORIZED, code, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::field("body", "invalid_body", r.body_text())
    }
}

fn upstream(message: String) -> ApiError {
    ApiError::new(StatusCode::BAD_GATEWAY, "llm_unavailable", message)
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let message = e.to_string();
        let conflict = |code: &str| ApiError::new(StatusCode::CONFLICT, code, message.clone());
        match &e {
            OrchestratorError::WorkerBusy(_) => conflict("worker_busy"),
            OrchestratorError::WorkerHasHistory(_) => conflict("worker_has_history"),
            OrchestratorError::WrongPhase { .. } => conflict("wrong_phase"),
            OrchestratorError::WrongTurn { .. } => conflict("wrong_turn"),
            OrchestratorError::RegenerationLimit => conflict("regeneration_limit"),
            OrchestratorError::MissingScenarioStep(_) => conflict("missing_scenario_step"),
            OrchestratorError::MissingUrl => ApiError::field("text", "missing_url", message),
            OrchestratorError::EmptyText => ApiError::field("text", "empty_text", message),
            OrchestratorError::Extraction(ExtractionError::InvalidEdit { index, reason }) => {
                ApiError::field(&format!("edits[{index}]"), "invalid_edit", reason.clone())
            }
            OrchestratorError::Extraction(ExtractionError::WrongStatus(_)) => {
                conflict("wrong_phase")
            }
            OrchestratorError::Extraction(_) => ApiError::field("edits", "invalid_edits", message),
            OrchestratorError::Act(ActError::Llm(_) | ActError::PredicateFailure(_))
            | OrchestratorError::Guidance(
                GuidanceError::GuidanceUnavailable(_) | GuidanceError::Llm(_),
            ) => upstream(message),
            OrchestratorError::Act(ActError::SessionClosed) => conflict("session_closed"),
            OrchestratorError::Act(_)
            | OrchestratorError::Guidance(_)
            | OrchestratorError::Memory(_) => ApiError::internal(message),
        }
    }
}
