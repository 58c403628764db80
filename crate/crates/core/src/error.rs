use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("input of {len} samples is shorter than one analysis window ({window} samples)")]
    InputTooShort { len: usize, window: usize },

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("unsupported audio encoding in {path}: {reason}")]
    AudioFormat { path: PathBuf, reason: String },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid decision rule: {0}")]
    Rule(String),

    #[error("invalid prefix state: {0}")]
    PrefixState(String),

    #[error("exit index {index} out of range 1..={exits}")]
    ExitIndex { index: usize, exits: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss or parameters (batch loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("dataset has no samples in the requested split")]
    EmptyDataset,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("optimizer state mismatch: {0}")]
    OptimizerState(String),

    #[error("not a model file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported model format version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checksum mismatch in {section}")]
    Checksum { section: String },

    #[error("model file truncated while reading {section}")]
    Truncated { section: String },

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
