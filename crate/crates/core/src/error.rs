use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("Assumption 1 violated: {0}")]
    NotErgodic(String),

    #[error("fixed point not unique; check Assumptions 1-2 ({0})")]
    SingularSystem(String),

    #[error("chain mixes too slowly for requested epsilon {epsilon} (cap {cap})")]
    SlowMixing { epsilon: f64, cap: usize },

    #[error("search cap {cap} exceeded while computing {what}")]
    CapExceeded { what: &'static str, cap: usize },

    #[error("series truncation M={given} too small; tolerance requires M >= {required}")]
    TruncationTooShort { given: usize, required: usize },

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("gradient bound violated at step {step}: |g| = {norm} > G = {bound}")]
    GradientBound { step: usize, norm: f64, bound: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
