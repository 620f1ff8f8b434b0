use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detector, trainer, adapter and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({left}, {top}, {right}, {bottom}): width and height must be positive")]
    InvalidBox {
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
    },

    #[error("box is empty after clipping to the image")]
    EmptyAfterClip,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image of {width}x{height} is too small for cell size {cell_size}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        cell_size: usize,
    },

    #[error("parameter vector has length {actual}, layout expects {expected}")]
    Layout { expected: usize, actual: usize },

    #[error("model file format: {0}")]
    Format(String),

    #[error("deformation cost is not convex: quadratic weights ({dx2}, {dy2}) must be positive")]
    Deformation { dx2: f64, dy2: f64 },

    #[error("pyramid level {level} is out of range for this model")]
    LevelOutOfRange { level: usize },

    #[error("need at least {needed} positives, got {got}")]
    DataTooSmall { needed: usize, got: usize },

    #[error("solver diverged: {0}")]
    Solver(String),

    #[error("source block {block} has zero norm and gamma is 0")]
    SingularBlock { block: usize },

    #[error("no moderate ground truth to evaluate against")]
    EmptyGroundTruth,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 usage, 3 data, 4 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Solver(_) | Error::SingularBlock { .. } | Error::Deformation { .. } => 4,
            _ => 3,
        }
    }
}
