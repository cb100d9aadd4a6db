use thiserror::Error;

use crate::diff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("hook site {layer} is outside a {n_layers}-layer model")]
    InvalidSite { layer: usize, n_layers: usize },
    #[error("duplicate perturbation at hook site {0}")]
    DuplicateSite(usize),
    #[error(
        "perturbation at site {site} touches position {position}, outside the prompt (prompt length {prompt_len})"
    )]
    PerturbationOutsidePrompt {
        site: usize,
        position: usize,
        prompt_len: usize,
    },
    #[error("perturbation shape {got:?} does not fit a sequence of {seq_len} x {d_model}")]
    PerturbationShape {
        got: Vec<usize>,
        seq_len: usize,
        d_model: usize,
    },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("sequence of length {len} exceeds context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("unknown hook profile `{0}`")]
    UnknownProfile(String),
    #[error("hook profile needs {needed} layers, model has {n_layers}")]
    ProfileTooDeep { needed: usize, n_layers: usize },
    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("invalid attack budget: {0}")]
    InvalidBudget(String),
    #[error("whitener needs at least {d} samples, got {n}")]
    InsufficientSample { n: usize, d: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("attack site {site} is after RMU layer {rmu_layer}")]
    RmuSiteAfterLayer { site: usize, rmu_layer: usize },
    #[error("invalid model configuration: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("batch does not match the configured loss: {0}")]
    BatchMismatch(String),
    #[error("{skipped} of {steps} steps skipped for non-finite gradients (budget {budget_pct}%)")]
    NanBudgetExceeded {
        skipped: usize,
        steps: usize,
        budget_pct: f64,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
