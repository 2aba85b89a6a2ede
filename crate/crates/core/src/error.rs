use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("prompt too short: {variant} attention needs at least {min} tokens, got {len}")]
    PromptTooShort {
        variant: &'static str,
        min: usize,
        len: usize,
    },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("invalid transition matrix: {0}")]
    InvalidTransitionMatrix(String),

    #[error("invalid prompt distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// The frequency mask annihilates the base-chain column of the current state.
    #[error("degenerate mask: no probability mass left out of state {state}")]
    DegenerateMask { state: usize },

    #[error("transition matrix has a zero entry at (to {to}, from {from}); the weight bijection needs strictly positive entries")]
    NotStrictlyPositive { from: usize, to: usize },

    #[error("embedding configuration: {0}")]
    Config(String),

    /// Label with (numerically) zero model probability.
    #[error("infinite loss at sample {index}: label {label} has probability {prob:e}")]
    InfiniteLoss {
        index: usize,
        label: usize,
        prob: f64,
    },

    #[error("step size too large: loss increased after {halvings} halvings (last step {step:e})")]
    StepSize { halvings: usize, step: f64 },

    #[error("initial prompt does not contain token {missing}")]
    Coverage { missing: usize },

    #[error("power-law fit failed: {0}")]
    Fit(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
