use thiserror::Error;

/// Errors surfaced by probe backends, executors and the protection layer.
///
/// The variants are coarse on purpose: the CLI maps each one to its own exit
/// status.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    /// The caller broke an operation contract (unknown line, value-typed
    /// parameter, inapplicable mutation, nested region, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// The host lacks an instruction or facility the backend needs.
    #[error("capability unavailable: {0}")]
    Capability(String),
    /// Hit and miss latencies could not be separated.
    #[error("calibration failed: {0}")]
    Calibration(String),
    /// An operation was invoked before its prerequisites were in place.
    #[error("invalid state: {0}")]
    State(String),
    /// A configuration value violates a constraint.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Allocation or another resource request failed.
    #[error("resource error: {0}")]
    Resource(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
