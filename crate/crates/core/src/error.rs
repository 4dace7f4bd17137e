use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint is missing {missing} parameters required for {wanted}")]
    MissingStage { missing: String, wanted: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(
        "iso-luminance violated for family `{family}`: hue_a {hue_a:?} has L={l_a:.3}, hue_b {hue_b:?} has L={l_b:.3}"
    )]
    IsoLuminance {
        family: String,
        hue_a: [u8; 3],
        hue_b: [u8; 3],
        l_a: f64,
        l_b: f64,
    },

    #[error("training diverged in {stage} at epoch {epoch}: {reason}")]
    Diverged {
        stage: String,
        epoch: usize,
        reason: String,
        /// Bundle from the last completed epoch whose losses were finite.
        last_good: Option<Box<crate::checkpoint::CheckpointBundle>>,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
