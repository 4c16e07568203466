use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected \"AGDW\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("malformed weight header: {0}")]
    Header(String),

    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} is outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("activation cache does not belong to this model: {0}")]
    StaleCache(String),

    #[error("malformed distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid region of interest: {0}")]
    InvalidRoi(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid decode config: {0}")]
    InvalidDecodeConfig(String),

    #[error("prompt of {prompt} tokens plus {new} new tokens exceeds context of {max}")]
    ContextOverflow { prompt: usize, new: usize, max: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("judge transport failure: {0}")]
    JudgeTransport(String),

    #[error("unparseable judge response: {reason}\n--- raw ---\n{raw}")]
    JudgeParse { reason: String, raw: String },

    #[error("quality score undefined: no yes/no verdicts")]
    EmptyVerdicts,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
