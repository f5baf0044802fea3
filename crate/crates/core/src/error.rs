use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown context: prompt {prompt}, position {position}, previous {previous:?}")]
    UnknownContext {
        prompt: usize,
        position: usize,
        previous: Option<usize>,
    },

    #[error("token {token} outside vocabulary of size {vocab_size}")]
    InvalidToken { token: usize, vocab_size: usize },

    #[error("probability vector has a negative entry {0}")]
    NegativeProbability(f64),

    #[error("reference distribution is zero where the current one has mass")]
    SupportMismatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("retention must be in (0, 1], got {0}")]
    InvalidRetention(f64),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("enumeration needs {required} tuples, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("malformed input at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
