use thiserror::Error;

use crate::overlap::Variant;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variant mismatch: expected {expected:?}, got {found:?}")]
    VariantMismatch { expected: Variant, found: Variant },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("overlap matrix is not positive semidefinite (smallest pivot {min_pivot:.3e})")]
    NotPsd { min_pivot: f64 },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("impulse kernel is singular: |sigma_vu| = {0:.3e} < 1e-8")]
    KernelSingularity(f64),

    #[error("gain is undefined for negative variance {0}")]
    NegativeVariance(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Diverged { epoch: usize, loss: f64 },
}
