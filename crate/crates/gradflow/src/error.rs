//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad tableau, empty layer list, unknown name, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API contract (dimension mismatch, out-of-range query, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values were passed in.
    #[error("numeric input error: {0}")]
    NumericInput(String),

    /// The adaptive loop exceeded its step budget.
    #[error("step budget exceeded: {used} steps (accepted + rejected) > {max_steps} on [{t0}, {t1}]")]
    StepBudget {
        used: usize,
        max_steps: usize,
        t0: f64,
        t1: f64,
    },

    /// The solution blew up (repeated non-finite steps).
    #[error("solution blow-up near t = {t}: {detail}")]
    BlowUp { t: f64, detail: String },

    /// A single step produced non-finite values; the caller may shrink dt and
    /// retry.
    #[error("step failure at t = {t}: non-finite stage")]
    StepFailure { t: f64, evals: usize },

    /// Operation is not supported for the given inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A reversible backward pass failed to reconstruct the forward trajectory.
    #[error("reconstruction divergence at step {step}: residual {residual} exceeds guard {guard}")]
    ReconstructionDivergence {
        step: usize,
        residual: f64,
        guard: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
