use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("architecture file line {line}: {message}")]
    ArchParse { line: usize, message: String },

    #[error("input of {size} pixels is too small: {message}")]
    InsufficientInput { size: usize, message: String },

    #[error("resolution mismatch: grid cell {cell} (row {row}, col {col}) receives no feature pixel")]
    ResolutionMismatch { cell: usize, row: usize, col: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("image {height}x{width} is too small for a {side}x{side} grid")]
    ImageTooSmall { height: usize, width: usize, side: usize },

    #[error("invalid patches: {0}")]
    InvalidPatches(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("manifest {path} line {line}: {message}")]
    ManifestParse { path: PathBuf, line: usize, message: String },

    #[error("manifest {manifest} references missing file {missing}")]
    DanglingPath { manifest: PathBuf, missing: PathBuf },

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("architecture fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("invalid transfer plan: {0}")]
    InvalidPlan(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("dataset has no segmentation masks")]
    MissingMasks,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("image decode failed for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
