use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("signal too short: {needed} samples required, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("rank deficient: requested {requested} components but data rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("schema mismatch: model expects {expected} features, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("missing class: {0}")]
    MissingClass(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
