use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Inputs with zero norm or zero variance.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Inconsistent configuration or mismatched model/adapter shapes.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed dataset records.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("generation error: {0}")]
    Generation(String),
    /// Checkpoint container that fails to parse.
    #[error("format error: {0}")]
    Format(String),
    /// A pipeline stage failed; carries the stage name and seed.
    #[error("stage `{stage}` failed (seed {seed}): {source}")]
    Stage {
        stage: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn stage(stage: impl Into<String>, seed: u64, source: Error) -> Self {
        Error::Stage { stage: stage.into(), seed, source: Box::new(source) }
    }
}
