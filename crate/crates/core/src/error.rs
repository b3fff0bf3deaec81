use std::path::PathBuf;

/// Errors produced anywhere in the detection toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty training corpus")]
    EmptyCorpus,

    #[error("empty corpus for domain `{0}`")]
    EmptyDomainCorpus(String),

    #[error("no overlapping tokens; domain cannot be aligned (domain `{0}`)")]
    NoOverlap(String),

    #[error("token `{token}` is not in the vocabulary of domain `{domain}`")]
    UnknownToken { token: String, domain: String },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("length mismatch: {left} results vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label leakage: {0} test records also appear in training data")]
    LabelLeakage(usize),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
