use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use colomil_core::mil::MilError;
use colomil_core::scorer::ScorerError;
use colomil_core::slide::SlideError;
use colomil_core::tiler::TileError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown slide `{0}`")]
    UnknownSlide(String),
    #[error("slide `{0}` has no result yet")]
    ResultNotReady(String),
    #[error("verdict `{0}` is not one of correct, wrong, inconclusive")]
    InvalidVerdict(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("storage error: {0}")]
    Storage(#[from] redb::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

macro_rules! via_redb {
    ($($t:ty),*) => {$(
        impl From<$t> for ServiceError {
            fn from(e: $t) -> Self {
                Self::Storage(e.into())
            }
        }
    )*};
}

via_redb!(
    redb::DatabaseError,
    redb::TransactionError,
    redb::TableError,
    redb::StorageError,
    redb::CommitError
);

/// Error body of every failed request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSlide(_) => "unknown_slide",
            Self::ResultNotReady(_) => "result_not_ready",
            Self::InvalidVerdict(_) => "invalid_verdict",
            Self::InvalidFeedback(_) => "invalid_feedback",
            Self::InvalidParameter(_) => "invalid_parameter",
            Self::BadRequest(_) => "bad_request",
            Self::Unauthorized => "unauthorized",
            Self::Slide(SlideError::UnsupportedFormat(_)) => "unsupported_format",
            Self::Slide(SlideError::CorruptFile { .. }) => "corrupt_slide",
            Self::Slide(_) => "slide_error",
            Self::Tile(_) => "tile_error",
            Self::Mil(_) | Self::Scorer(_) => "inference_error",
            Self::Storage(_) | Self::Io(_) | Self::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSlide(_) => StatusCode::NOT_FOUND,
            Self::ResultNotReady(_) => StatusCode::CONFLICT,
            Self::InvalidVerdict(_)
            | Self::InvalidFeedback(_)
            | Self::InvalidParameter(_)
            | Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Unauthorized => StatusCode::UNAUTHORIZED,
            Self::Slide(_) | Self::Tile(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().into(),
            message: self.to_string(),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}
