use std::fmt;

use serde::{Deserialize, Serialize};

/// Failure class of an [`EpError`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    TagMismatch,
    ConfigMismatch,
    CapacityExceeded,
    HandleStateError,
    TransportClosed,
}

impl ErrorCode {
    /// Stable numeric code used across the C boundary. Zero is reserved for success.
    pub fn as_i32(self) -> i32 {
        match self {
            ErrorCode::InvalidArgument => 1,
            ErrorCode::ShapeMismatch => 2,
            ErrorCode::TagMismatch => 3,
            ErrorCode::ConfigMismatch => 4,
            ErrorCode::CapacityExceeded => 5,
            ErrorCode::HandleStateError => 6,
            ErrorCode::TransportClosed => 7,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {detail}")]
pub struct EpError {
    pub code: ErrorCode,
    pub detail: String,
}

impl EpError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Self { code, detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidArgument, detail)
    }

    pub fn shape(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::ShapeMismatch, detail)
    }

    pub fn tag(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::TagMismatch, detail)
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::ConfigMismatch, detail)
    }

    pub fn capacity(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::CapacityExceeded, detail)
    }

    pub fn state(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::HandleStateError, detail)
    }

    pub fn closed(detail: impl Into<String>) -> Self {
        Self::new(ErrorCode::TransportClosed, detail)
    }
}

pub type Result<T, E = EpError> = std::result::Result<T, E>;
