use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("non-finite parameter in tensor {0}")]
    NonFinite(String),
    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),
    #[error("inventory mismatch: missing {missing:?}, unexpected {extra:?}")]
    Inventory { missing: Vec<String>, extra: Vec<String> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("non-finite activation: {0}")]
    NonFiniteActivation(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn tensor(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Tensor {
            name: name.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
