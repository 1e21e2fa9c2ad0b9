use thiserror::Error;

use crate::datastore::StoreError;
use crate::geo::GeoError;

/// Errors raised by the platform operations. Each variant has a stable
/// machine-readable code used on the wire.
#[derive(Debug, Error)]
pub enum Error {
    #[error("study {0} already exists")]
    DuplicateStudyId(String),
    #[error("invalid study configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("study {0} is closed")]
    StudyClosed(String),
    #[error("study {0} is already closed")]
    AlreadyClosed(String),

    #[error("subject {0} already has tokens")]
    DuplicateSubjectLabel(String),
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("malformed enrollment payload: {0}")]
    MalformedPayload(String),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("token {0} was already used; activate a backup code")]
    TokenAlreadyUsed(String),
    #[error("token {0} has no registration")]
    NotRegistered(String),
    #[error("registration for {0} has already left the study")]
    AlreadyLeft(String),

    #[error("payload checksum does not match")]
    ChecksumMismatch,
    #[error("batch payload is empty")]
    EmptyPayload,
    #[error("no active registration for {0}")]
    UnknownRegistration(String),
    #[error("sensor {0} is not part of the study")]
    SensorNotInStudy(String),
    #[error("authentication failed")]
    AuthFailure,

    #[error("malformed request: {0}")]
    MalformedRequest(String),

    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateStudyId(_) => "DuplicateStudyId",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnknownStudy(_) => "UnknownStudy",
            Error::StudyClosed(_) => "StudyClosed",
            Error::AlreadyClosed(_) => "AlreadyClosed",
            Error::DuplicateSubjectLabel(_) => "DuplicateSubjectLabel",
            Error::UnknownSubject(_) => "UnknownSubject",
            Error::MalformedPayload(_) => "MalformedPayload",
            Error::UnknownToken(_) => "UnknownToken",
            Error::TokenAlreadyUsed(_) => "TokenAlreadyUsed",
            Error::NotRegistered(_) => "NotRegistered",
            Error::AlreadyLeft(_) => "AlreadyLeft",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::EmptyPayload => "EmptyPayload",
            Error::UnknownRegistration(_) => "UnknownRegistration",
            Error::SensorNotInStudy(_) => "SensorNotInStudy",
            Error::AuthFailure => "AuthFailure",
            Error::MalformedRequest(_) => "MalformedRequest",
            Error::Store(e) => e.code(),
            Error::Geo(_) => "GeoFailure",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
