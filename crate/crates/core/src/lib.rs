//! Learning dynamics of low-rank recurrent networks.
//!
//! Two views of the same training process live side by side here:
//!
//! * the N-dimensional network ([`network`]), trained by backpropagation
//!   through time in parameter space, and
//! * the scalar overlap description ([`overlap`], [`effective`]), where the
//!   within-episode dynamics collapse to a 2- or 3-dimensional system and
//!   learning becomes a low-dimensional ODE preconditioned by a Gram matrix.
//!
//! The [`training`] module drives either view through multi-phase protocols;
//! [`invariants`] and [`analysis`] hold the post-hoc diagnostics.

pub mod analysis;
pub mod effective;
mod error;
pub mod gradients;
pub mod invariants;
pub mod linalg;
pub mod network;
pub mod overlap;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use overlap::{GradientVector, OverlapState, Variant};
