//! Error type shared by every module of the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QftError>;

#[derive(Debug, Error)]
pub enum QftError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient stack underflow")]
    StackUnderflow,

    #[error("gradient stack inconsistent: {0}")]
    StackInconsistent(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<QftError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QftError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        QftError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        QftError::Step {
            step,
            source: Box::new(self),
        }
    }
}
