use thiserror::Error;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("mask sampling failed after {tries} tries (last coverage {last_coverage:.4})")]
    SamplingFailure { tries: usize, last_coverage: f64 },

    #[error("patch search failed: {0}")]
    SearchFailure(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
