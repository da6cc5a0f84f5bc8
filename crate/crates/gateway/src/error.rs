use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use driftctl_core::data::DataError;
use driftctl_core::pipeline::PipelineError;
use driftctl_core::registry::RegistryError;
use serde::{Deserialize, Serialize};

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.to_string(), message: message.into(), field: None } }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        let f = field.into();
        self.body.field = (!f.is_empty()).then_some(f);
        self
    }

    pub fn unknown_service(name: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_service", format!("no service named `{name}`"))
    }

    pub fn unknown_version(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_version", format!("unknown version {id}"))
    }

    pub fn invalid_body(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        use StatusCode as S;
        match &e {
            PipelineError::Config(c) => {
                Self::new(S::UNPROCESSABLE_ENTITY, "invalid_config", c.message.clone()).with_field(c.field.clone())
            }
            PipelineError::Data(d) => match d {
                DataError::UnknownRecord(_) => Self::new(S::NOT_FOUND, "unknown_record", msg),
                DataError::NotEnqueued(_) => Self::new(S::CONFLICT, "not_enqueued", msg),
                DataError::AlreadyLabeled(_) => Self::new(S::CONFLICT, "already_labeled", msg),
                DataError::DimensionMismatch { .. } => {
                    Self::new(S::UNPROCESSABLE_ENTITY, "dimension_mismatch", msg).with_field("features")
                }
                DataError::InvalidRecord(_) => Self::new(S::UNPROCESSABLE_ENTITY, "invalid_record", msg),
                _ => Self::internal(msg),
            },
            PipelineError::Registry(r) => match r {
                RegistryError::UnknownVersion(_) => Self::new(S::NOT_FOUND, "unknown_version", msg),
                RegistryError::InvalidStatus { .. } => Self::new(S::CONFLICT, "invalid_status", msg),
                RegistryError::NotValidated(_) => Self::new(S::CONFLICT, "not_validated", msg),
                RegistryError::NothingToRollBack => Self::new(S::CONFLICT, "nothing_to_roll_back", msg),
                _ => Self::internal(msg),
            },
            _ => Self::internal(msg),
        }
    }
}
