use std::path::PathBuf;

/// Crate-wide error type. Each variant maps to a distinct process exit code
/// so failures are scriptable (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("corrupt weight file {path}: {reason}")]
    CorruptWeights { path: PathBuf, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Exit-code map: 0 ok, 2 config (incl. shape/range), 3 divergence,
    /// 4 I/O, 5 corrupt weights.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Range(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io(_) | Error::Image(_) => 4,
            Error::CorruptWeights { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
