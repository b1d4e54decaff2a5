use std::path::PathBuf;

use crate::typelib::TypeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("{context}: schema violation at `{path}`: {message}")]
    Schema {
        context: String,
        path: String,
        message: String,
    },

    #[error(transparent)]
    Type(#[from] TypeError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("subword vocabulary: {0}")]
    Vocab(String),

    #[error("invalid function record {function}: {message}")]
    InvalidFunction { function: String, message: String },

    #[error("model: {0}")]
    Model(String),

    #[error("decoding: {0}")]
    Decode(String),

    #[error("constraint: {0}")]
    Constraint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("corpus lacks `{field}`; re-ingest the corpus with that field populated")]
    MissingField { field: &'static str },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, err: serde_path_to_error::Error<serde_json::Error>) -> Self {
        Error::Schema {
            context: context.into(),
            path: err.path().to_string(),
            message: err.into_inner().to_string(),
        }
    }
}
