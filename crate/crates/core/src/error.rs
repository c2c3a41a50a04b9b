use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corruption(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown id `{id}` referenced at line {line}")]
    Reference { line: usize, id: String },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("forward passes disagree: {0}")]
    Determinism(String),

    #[error("degenerate layer weights: sum {0:e} too close to zero")]
    DegenerateWeights(f64),

    #[error("utterance `{utt}`: {source}")]
    Utterance {
        utt: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step} (batch {}): {source}", .utterances.join(","))]
    Diverged {
        step: usize,
        utterances: Vec<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn for_utterance(utt: &str, source: Error) -> Self {
        Error::Utterance {
            utt: utt.to_string(),
            source: Box::new(source),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
        }
    }
}
