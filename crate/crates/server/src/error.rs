use std::path::PathBuf;

use thiserror::Error;

use crate::store::Status;

pub type Result<T> = std::result::Result<T, ServerError>;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {id} is not done (status: {status})")]
    NotDone { id: String, status: Box<Status> },
    #[error("session {id} cannot move from {from} to {to}")]
    InvalidTransition { id: String, from: Box<Status>, to: Box<Status> },
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corrupt session manifest {}: {reason}", .path.display())]
    CorruptManifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] tsexplain_core::Error),
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no route for {0}")]
    UnknownRoute(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("artifact {name} of session {id} is unreadable: {reason}")]
    Artifact { id: String, name: String, reason: String },
}

impl ServerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            ServerError::FileNotFound(path)
        } else {
            ServerError::Io { path, source }
        }
    }

    /// Stable machine-readable name, used in API errors and failed statuses.
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::NotFound(_) => "NotFound",
            ServerError::NotDone { .. } => "SessionNotDone",
            ServerError::InvalidTransition { .. } => "InvalidTransition",
            ServerError::FileNotFound(_) => "FileNotFound",
            ServerError::InvalidConfig(_) => "InvalidConfig",
            ServerError::InvalidRequest(_) => "InvalidPayload",
            ServerError::CorruptManifest { .. } => "CorruptManifest",
            ServerError::Core(e) => core_code(e),
            ServerError::Io { .. } => "Io",
            ServerError::UnknownRoute(_) => "NotFound",
            ServerError::Internal(_) => "Internal",
            ServerError::Artifact { .. } => "ArtifactUnreadable",
        }
    }
}

pub fn core_code(e: &tsexplain_core::Error) -> &'static str {
    use tsexplain_core::Error as E;
    match e {
        E::EmptyInput => "EmptyInput",
        E::RaggedRows { .. } => "RaggedRows",
        E::NonNumeric { .. } => "NonNumeric",
        E::InvalidDataset(_) => "InvalidDataset",
        E::ShapeMismatch(_) => "ShapeMismatch",
        E::NonFiniteLoss { .. } => "NonFiniteLoss",
        E::NonFinite(_) => "NonFinite",
        E::InvalidConfig(_) => "InvalidConfig",
        E::ManifestParse(_) => "ManifestParse",
        E::UnknownLayerKind(_) => "UnknownLayerKind",
        E::DegenerateDesign => "DegenerateDesign",
        E::MissingAttributions(_) => "MissingAttributions",
        E::IndexOutOfRange { .. } => "IndexOutOfRange",
        E::InvalidParams(_) => "InvalidParams",
        E::PerplexityTooLarge { .. } => "PerplexityTooLarge",
        E::DimensionMismatch { .. } => "DimensionMismatch",
        E::NoUnlikeNeighbor => "NoUnlikeNeighbor",
        E::NoFlipWithinBudget { .. } => "NoFlipWithinBudget",
        E::MissingContext(_) => "MissingContext",
        E::UnknownMethod(_) => "UnknownMethod",
    }
}
