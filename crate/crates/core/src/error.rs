use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input bytes: bad magic, truncated payload, header junk.
    #[error("format error: {0}")]
    Format(String),

    /// A caller-supplied parameter is out of its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Two things that must agree (dims, lengths, counts) do not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// The clip has no pixels above the variance threshold; there is no
    /// zone to extract features from.
    #[error("static clip: no effective points above the variance threshold")]
    StaticClip,

    /// Training diverged. Carries the epoch and sequence index for triage.
    #[error("non-finite loss at epoch {epoch}, sequence {sequence}")]
    NonFiniteLoss { epoch: usize, sequence: usize },

    /// Metric needs both classes present in the sample.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
