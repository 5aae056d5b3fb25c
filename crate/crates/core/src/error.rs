//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    /// Signal components cannot be told apart (equal wave frequencies or
    /// overlapping pulse supports).
    #[error("jammed signals: {0}")]
    Jammed(String),

    #[error("localization failed: {0}")]
    LocalizationFailed(String),

    #[error("simulation aborted: {0}")]
    SimulationAborted(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
