use thiserror::Error;

/// Failure while evaluating a coefficient, payoff or test-function field.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of negative value {0}")]
    NegativeSqrt(f64),
    #[error("non-finite result in {0}")]
    NonFinite(String),
    #[error("spinning measure returned {got} weights for {expected} edges")]
    AlphaLength { expected: usize, got: usize },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpiderError {
    #[error("invalid network: {0}")]
    Network(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation failed at path {path}, step {step}: {source}")]
    Eval {
        path: usize,
        step: usize,
        #[source]
        source: EvalError,
    },
    #[error("evaluation failed: {0}")]
    Field(#[from] EvalError),
    #[error("level {eps} does not exceed the vertex-activity radius {activity}")]
    LevelTooSmall { eps: f64, activity: f64 },
    #[error("singular vertex system at l-slice {slice}, time index {time}")]
    SingularVertex { slice: usize, time: usize },
    #[error("path does not carry the gaussian increments it was driven by")]
    MissingIncrements,
    #[error("non-finite gaussian draw {0}")]
    BadGaussian(f64),
}

impl SpiderError {
    pub(crate) fn at(path: usize, step: usize) -> impl FnOnce(EvalError) -> SpiderError {
        move |source| SpiderError::Eval { path, step, source }
    }
}

pub type Result<T, E = SpiderError> = std::result::Result<T, E>;
