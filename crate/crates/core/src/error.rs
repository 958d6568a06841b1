//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation is not orthonormal with det +1 (residual {residual:.3e})")]
    InvalidRotation { residual: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("elevation band [{elev_min}, {elev_max}] deg admits no viewpoints")]
    ZeroViewpoints { elev_min: f64, elev_max: f64 },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh parse error at line {line}: {reason}")]
    MeshParse { line: usize, reason: String },

    #[error("logical defect requires a mesh with named sub-parts")]
    PartRequired,

    #[error("defect location ({x:.3}, {y:.3}) lies outside the rendered foreground")]
    LocationOutsideForeground { x: f64, y: f64 },

    #[error("degenerate defect: {0}")]
    DegenerateDefect(String),

    #[error("defects can only be injected into normal pairs")]
    AlreadyAnomalous,

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("no foreground component above the minimum size")]
    EmptyForeground,

    #[error("best template IoU {best_iou:.4} is below the overlap threshold")]
    NoOverlap { best_iou: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("foreground mask is empty")]
    EmptyForegroundMask,

    #[error("training pair `{pair_id}` carries a non-empty defect mask")]
    AnomalousTrainingPair { pair_id: String },

    #[error("metric {metric} failed: {source}")]
    Metric {
        metric: &'static str,
        #[source]
        source: MetricError,
    },

    #[error("missing score map for method `{method}`, pair `{pair_id}`")]
    MissingScores { method: String, pair_id: String },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Failure modes of the ranking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("only one class present")]
    SingleClass,
    #[error("no positive samples")]
    NoPositives,
    #[error("no anomalous regions")]
    NoAnomalousRegions,
    #[error("score and label lengths differ")]
    LengthMismatch,
}

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRotation { .. } => "invalid_rotation",
            Error::InvalidIntrinsics(_) => "invalid_intrinsics",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ZeroViewpoints { .. } => "zero_viewpoints",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::MeshParse { .. } => "mesh_parse",
            Error::PartRequired => "part_required",
            Error::LocationOutsideForeground { .. } => "location_outside_foreground",
            Error::DegenerateDefect(_) => "degenerate_defect",
            Error::AlreadyAnomalous => "already_anomalous",
            Error::Config { .. } => "config",
            Error::EmptyForeground => "empty_foreground",
            Error::NoOverlap { .. } => "no_overlap",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Format { .. } => "format",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyForegroundMask => "empty_foreground_mask",
            Error::AnomalousTrainingPair { .. } => "anomalous_training_pair",
            Error::Metric { .. } => "metric",
            Error::MissingScores { .. } => "missing_scores",
            Error::UnknownVariant(_) => "unknown_variant",
            Error::UnknownMethod(_) => "unknown_method",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
