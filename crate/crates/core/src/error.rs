use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: expected mono audio, found {channels} channels", path.display())]
    NotMono { path: PathBuf, channels: u16 },

    #[error("{}: unsupported sample format ({bits}-bit {format})", path.display())]
    UnsupportedBitDepth {
        path: PathBuf,
        bits: u16,
        format: &'static str,
    },

    #[error("{}: sample rate {found} Hz, expected {expected} Hz", path.display())]
    SampleRate { path: PathBuf, found: u32, expected: u32 },

    #[error("wav: {0}")]
    Wav(String),

    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal has zero power; SNR is undefined")]
    ZeroPower,

    #[error("signal of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },

    #[error("no valid prediction positions: {frames} frames with N = {n}")]
    NoValidPositions { frames: usize, n: usize },

    #[error("manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: bad magic (expected \"CSE1\")")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    Version(u32),

    #[error("checkpoint: file is truncated")]
    Truncated,

    #[error("checkpoint: malformed container: {0}")]
    Malformed(String),

    #[error("checkpoint: missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint: unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("checkpoint architecture mismatch on `{field}`: checkpoint has {found}, requested {expected}")]
    Structural {
        field: String,
        found: String,
        expected: String,
    },

    #[error("operation requires a causal model: {0}")]
    NotCausal(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures caused by NaN/Inf during computation.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }

    /// True for failures reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Io { .. }
                | Error::Wav(_)
                | Error::NotMono { .. }
                | Error::UnsupportedBitDepth { .. }
                | Error::SampleRate { .. }
                | Error::BadMagic
                | Error::Version(_)
                | Error::Truncated
                | Error::Malformed(_)
                | Error::Manifest { .. }
        )
    }
}
