use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {what}: {message}")]
    Parse { what: &'static str, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid array geometry: {0}")]
    Geometry(String),

    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("audio has {found} channels but the array geometry has {expected} microphones")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("clip of {samples} samples is shorter than one analysis window of {window}")]
    ClipTooShort { samples: usize, window: usize },

    #[error("invalid stft parameters: {0}")]
    StftParams(String),

    #[error("cross-relation row needs {needed} buffered frames, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("invalid microphone pair ({0}, {1})")]
    InvalidPair(usize, usize),

    #[error("invalid depth at pixel ({u}, {v})")]
    InvalidDepth { u: f64, v: f64 },

    #[error("warped point lies behind the target image plane")]
    BehindCamera,

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stream error: {0}")]
    Stream(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }

    /// True for failures detected before any processing starts: bad files,
    /// bad parameters, inconsistent inputs.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Config(_)
            | Error::Geometry(_)
            | Error::Io { .. }
            | Error::UnsupportedEncoding(_)
            | Error::ChannelMismatch { .. }
            | Error::StftParams(_)
            | Error::Scene(_) => true,
            Error::AtFrame { .. } => false,
            _ => false,
        }
    }
}
