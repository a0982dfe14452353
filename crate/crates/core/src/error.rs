use std::path::PathBuf;

/// Errors raised anywhere in the pipeline. Every message is prefixed with the
/// module that detected the problem.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("numerics: shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerics: non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("numerics: backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{module}: {msg}")]
    Invalid { module: &'static str, msg: String },

    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            module,
            msg: msg.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
