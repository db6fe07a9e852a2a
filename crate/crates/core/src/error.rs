use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("region guard violation: shard {shard} (region {shard_region}) accessed from {stage_region} stage")]
    RegionViolation {
        shard: String,
        shard_region: String,
        stage_region: String,
    },

    #[error("token {token:?} not covered by lexicon and fallback rule is disabled")]
    LexiconMiss { token: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{0}")]
    Config(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/guard, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
