use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("non-finite height at row {row}, col {col} and no fill value configured")]
    NonFiniteHeight { row: usize, col: usize },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("point ({x}, {y}) lies outside the raster extent")]
    OutOfBounds { x: f64, y: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid link: {0}")]
    InvalidLink(String),

    #[error("inconsistent configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("holdout {holdout}, run {run}: {source}")]
    Fold {
        holdout: String,
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot split region {region}: {reason}")]
    Split { region: String, reason: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::NonFiniteHeight { .. } => "nodata",
            Error::InvalidRaster(_) => "raster",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::InvalidGrid(_) => "grid",
            Error::InvalidLink(_) => "link",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } => "diverged",
            Error::Fold { source, .. } => source.kind(),
            Error::Split { .. } => "split",
            Error::Generation(_) => "generation",
            Error::Csv(_) => "csv",
        }
    }
}
