use std::path::PathBuf;

use thiserror::Error;

use crate::graph::OpTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are not compatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("expected a scalar-shaped tensor, got {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("non-finite value produced by {op:?}")]
    NonFinite { op: OpTag },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: image is {found} but an RGB image was expected")]
    NotRgb { path: PathBuf, found: String },

    #[error("image {image:?} and mask {mask:?} have different dimensions")]
    DimensionMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file is truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: parameter {name} has shape {found:?}, model expects {expected:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: incompatible with model ({0})")]
    Incompatible(String),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
