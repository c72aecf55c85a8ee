use thiserror::Error;

#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("derivative index on non-dependent symbol `{0}`")]
    BadJet(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid orientation: {0}")]
    InvalidOrientation(String),
    #[error("lambda degree too high: {0}")]
    LambdaDegree(String),
    #[error("nonlocal expression where a local one is required: {0}")]
    NonlocalNotAllowed(String),
    #[error("incompatible covering: {0}")]
    IncompatibleCovering(String),
    #[error("degenerate sample point (denominator guard tripped)")]
    DegeneratePoint,
    #[error("no factor found: {0}")]
    NoFactor(String),
    #[error("empty solution space: {0}")]
    NoSolution(String),
    #[error("unknown corpus system `{0}`")]
    UnknownCorpus(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
