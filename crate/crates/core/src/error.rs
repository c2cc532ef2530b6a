use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelFormatError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::Model(e) => e.kind(),
            Error::Idx(e) => e.kind(),
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Failures while decoding a model file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelFormatError {
    #[error("bad magic: expected \"XDNC\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated model file: needed {needed} bytes, only {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("header/payload length disagreement: {0}")]
    LengthMismatch(String),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed header: {0}")]
    Header(String),
}

impl ModelFormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFormatError::BadMagic(_) => "model_bad_magic",
            ModelFormatError::VersionMismatch { .. } => "model_version_mismatch",
            ModelFormatError::Truncated { .. } => "model_truncated",
            ModelFormatError::LengthMismatch(_) => "model_length_mismatch",
            ModelFormatError::Checksum { .. } => "model_checksum",
            ModelFormatError::Header(_) => "model_header",
        }
    }
}

/// Failures while decoding IDX image/label files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("IDX dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file: needed {needed} bytes, only {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: u8, num_classes: usize },
}

impl IdxError {
    pub fn kind(&self) -> &'static str {
        match self {
            IdxError::BadMagic { .. } => "idx_bad_magic",
            IdxError::DimensionOverflow(_) => "idx_dimension_overflow",
            IdxError::CountMismatch { .. } => "idx_count_mismatch",
            IdxError::Truncated { .. } => "idx_truncated",
            IdxError::LabelRange { .. } => "idx_label_range",
        }
    }
}
