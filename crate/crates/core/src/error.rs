use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiveError>;

#[derive(Debug, Error)]
pub enum DiveError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("non-finite log weight at vertex {vertex}, cluster {cluster}")]
    InferenceDivergence { vertex: usize, cluster: usize },

    #[error("objective is not finite: {0}")]
    FitDivergence(String),

    #[error("degenerate staging: baseline DPS has zero spread")]
    DegenerateStaging,

    #[error("cluster {0} has zero posterior mass")]
    DegenerateCluster(usize),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}:{location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("dataset fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DiveError {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            DiveError::InvalidDataset(_) => "invalid_dataset",
            DiveError::Config(_) => "config",
            DiveError::ParameterDomain(_) => "parameter_domain",
            DiveError::InferenceDivergence { .. } => "inference_divergence",
            DiveError::FitDivergence(_) => "fit_divergence",
            DiveError::DegenerateStaging => "degenerate_staging",
            DiveError::DegenerateCluster(_) => "degenerate_cluster",
            DiveError::UndefinedCorrelation(_) => "undefined_correlation",
            DiveError::Format { .. } => "format",
            DiveError::CorruptPayload(_) => "corrupt_payload",
            DiveError::UnsupportedVersion { .. } => "unsupported_version",
            DiveError::FingerprintMismatch(_) => "fingerprint_mismatch",
            DiveError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DiveError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        DiveError::Format {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
