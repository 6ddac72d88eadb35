use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no scale factor configured for category `{0}`")]
    MissingScaleFactor(String),

    #[error("category `{0}` is not known to the model")]
    UnknownCategory(String),

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("posterior curve is not invertible for detector probability {0}")]
    NotInvertible(f64),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("scene has {0} variables; exact enumeration supports at most {max}, reduce the scene size", max = crate::synth::MAX_ENUMERATION_VARIABLES)]
    TooManyVariables(usize),

    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("model schema version mismatch: file declares version {found}, this build reads version {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
