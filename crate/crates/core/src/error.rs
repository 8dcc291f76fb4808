//! Crate-wide error type.
//!
//! Variants are grouped into three classes so callers (notably the CLI) can
//! map failures onto distinct exit codes: invalid input, exhausted resource
//! budgets, and numerical breakdown.

use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller passed something malformed (bad dimension, bad parameter range).
    Usage,
    /// A configured budget (memory, leaf count, path access) was exceeded.
    Resource,
    /// Arithmetic produced non-finite values or a factorization broke down.
    Numerical,
}

/// Error type shared by all library modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("metric parameter beta must be positive, got {0}")]
    NonpositiveBeta(f64),

    #[error("admissibility parameter rho must lie in (0, 1], got {0}")]
    InvalidRho(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty or degenerate input: {0}")]
    DegenerateInput(String),

    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    #[error("path not writable: {0}")]
    PathNotWritable(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("covariance degenerate: {0}")]
    DegenerateCovariance(String),

    #[error(transparent)]
    Model(#[from] ModelIoError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The failure class this error belongs to.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DimensionMismatch(_)
            | Error::NonpositiveBeta(_)
            | Error::InvalidRho(_)
            | Error::InvalidArgument(_)
            | Error::DegenerateInput(_) => ErrorClass::Usage,
            Error::ResourceCap(_) | Error::PathNotWritable(_) | Error::Io(_) => {
                ErrorClass::Resource
            }
            Error::NonFinite(_)
            | Error::NumericalBreakdown(_)
            | Error::DegenerateCovariance(_) => ErrorClass::Numerical,
            Error::Model(e) => e.class(),
        }
    }
}

/// Errors raised while reading or writing a serialized model file.
///
/// Version, truncation, and checksum problems are distinct variants so that
/// callers can tell a stale file from a damaged one.
#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("unsupported model format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("model file truncated: {0}")]
    Truncated(String),

    #[error("model file checksum mismatch (file is corrupt)")]
    ChecksumMismatch,

    #[error("malformed model payload: {0}")]
    Malformed(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ModelIoError {
    fn class(&self) -> ErrorClass {
        match self {
            ModelIoError::Io(_) => ErrorClass::Resource,
            _ => ErrorClass::Usage,
        }
    }
}

/// Convenient result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
