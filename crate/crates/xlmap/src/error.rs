//! Error type for file formats, pipelines and the CLI, with the exit code
//! classification used by `main`.

use std::path::PathBuf;

/// Process exit codes: 0 success, 2 config error, 3 data error, 4 numeric
/// failure.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error(transparent)]
    Core(#[from] xlmap_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u16 },

    #[error("{path}: file is truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: {what}")]
    Malformed { path: PathBuf, what: String },

    #[error("{path}: row {row} is not stochastic (sum {sum})")]
    FileRowNotStochastic { path: PathBuf, row: usize, sum: f64 },

    #[error("{path}: checkpoint checksum mismatch")]
    CorruptCheckpoint { path: PathBuf },

    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("missing posteriors for utterance {utt_id:?} at {path}")]
    MissingPosterior { utt_id: String, path: PathBuf },

    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: invalid toml: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error(
        "checkpoint is for {ckpt_lang:?} with {ckpt_dim} tokens, inventory is {inv_lang:?} with {inv_dim} tokens"
    )]
    InventoryMismatch {
        ckpt_lang: String,
        ckpt_dim: usize,
        inv_lang: String,
        inv_dim: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, what: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            what: what.into(),
        }
    }

    /// Exit code of the process when this error reaches `main`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            Error::Core(core) => match core {
                xlmap_core::Error::InvalidConfig { .. }
                | xlmap_core::Error::TopNOutOfRange { .. } => EXIT_CONFIG,
                xlmap_core::Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
            _ => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
