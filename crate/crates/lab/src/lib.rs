//! Experiment runner for the low-rank RNN learning laboratory.
//!
//! An experiment is described by a JSON config ([`config::ExperimentConfig`]),
//! executed by [`experiments::execute`] into traces and named metrics, written
//! to disk by [`output`], and judged by the named checks in [`checks`].
//! [`registry`] holds the built-in configs.

pub mod checks;
pub mod config;
pub mod experiments;
pub mod output;
pub mod properties;
pub mod registry;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Core(lowrank_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<lowrank_core::Error> for LabError {
    fn from(e: lowrank_core::Error) -> Self {
        use lowrank_core::Error as E;
        match e {
            E::NonFinite { .. } | E::Diverged { .. } => LabError::Divergence(e.to_string()),
            E::InvalidConfig(m) => LabError::Config(m),
            other => LabError::Core(other),
        }
    }
}

impl LabError {
    /// Process exit code: 2 for divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Divergence(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub use checks::{evaluate, CheckOutcome};
pub use config::ExperimentConfig;
pub use experiments::{execute, RunOutput};
