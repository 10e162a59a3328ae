use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("non-finite value at sample {sample}: {what}")]
    NonFinite { sample: usize, what: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("bundle integrity: {0}")]
    Integrity(String),

    #[error("budget exceeded after {elapsed_secs:.1}s (cap {cap_secs:.1}s)")]
    Timeout { elapsed_secs: f64, cap_secs: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
