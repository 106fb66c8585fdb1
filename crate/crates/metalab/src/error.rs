use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("node {0} is not a scalar")]
    NotScalar(usize),

    #[error("unknown parameter name `{0}`")]
    UnknownParam(String),

    #[error("SVD failed to converge after {0} sweeps")]
    SvdNoConvergence(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient classes: split has {have}, need {need}")]
    InsufficientClasses { have: usize, need: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("bad file format: {0}")]
    BadFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
