use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("duplicate field id {0} in label file")]
    DuplicateField(u32),
    #[error("unknown label token {0:?}")]
    UnknownLabelToken(String),
    #[error("field {0} not present in field-id mask")]
    FieldNotFound(u32),
    #[error("not enough cloud-free instances: {0}")]
    InsufficientCloudFreeInstances(String),
    #[error("field bounding box {rows}x{cols} exceeds the 64x64 patch")]
    FieldTooLarge { rows: usize, cols: usize },
    #[error("field {0} is empty after border erosion")]
    EmptyAfterErosion(u32),
    #[error("missing band {0}")]
    MissingBand(String),
    #[error("day of year {0} outside [1, 365]")]
    DayOutOfRange(i64),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("sub-patch store is empty")]
    EmptyStore,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("too few points: {points} points for k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cluster mapping strategy best_f1 needs labels")]
    MissingLabels,
    #[error("cluster mapping strategy low_ndvi needs per-cluster NDVI means")]
    MissingNdvi,
    #[error("field {0} has no sub-patches")]
    EmptyField(u32),
    #[error("labeled field {0} has no prediction")]
    MissingPrediction(u32),
    #[error("confusion counts are all zero")]
    EmptyConfusion,
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("i/o failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Stable variant name, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::DuplicateField(_) => "DuplicateField",
            Error::UnknownLabelToken(_) => "UnknownLabelToken",
            Error::FieldNotFound(_) => "FieldNotFound",
            Error::InsufficientCloudFreeInstances(_) => "InsufficientCloudFreeInstances",
            Error::FieldTooLarge { .. } => "FieldTooLarge",
            Error::EmptyAfterErosion(_) => "EmptyAfterErosion",
            Error::MissingBand(_) => "MissingBand",
            Error::DayOutOfRange(_) => "DayOutOfRange",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::EmptyStore => "EmptyStore",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::VariantMismatch(_) => "VariantMismatch",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::MissingLabels => "MissingLabels",
            Error::MissingNdvi => "MissingNdvi",
            Error::EmptyField(_) => "EmptyField",
            Error::MissingPrediction(_) => "MissingPrediction",
            Error::EmptyConfusion => "EmptyConfusion",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::IoFailure { .. } => "IoFailure",
            Error::Json { .. } => "Json",
            Error::Csv { .. } => "Csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
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

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
