use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("cannot place {requested} objects on a board of {cells} cells")]
    Overcrowded { requested: usize, cells: usize },

    #[error("instance has {sites} consumable sites; the exact planner supports at most {max}")]
    TooManySites { sites: usize, max: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay buffer holds {len} transitions, batch needs {batch}")]
    UnderfullBuffer { len: usize, batch: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no seed pair satisfied the constraints after {attempts} attempts")]
    NoSeedPair { attempts: usize },

    #[error("experiment invalid: {0}")]
    ExperimentInvalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
