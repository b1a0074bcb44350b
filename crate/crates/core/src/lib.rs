//! Anchored fine-tuning laboratory.
//!
//! Fine-tuning toward a frozen reference model is stabilized by distilling,
//! at each outer iteration, toward an anchor that interpolates between the
//! current model and the reference. The crate provides the interpolation
//! operators and their KL bounds, toy model families with analytic
//! gradients, the training procedures and baselines, a seeded forgetting
//! benchmark, numerical oracles, and a CLI.

use std::fmt;

pub mod anchor;
pub mod benchgen;
pub mod cli;
pub mod config;
pub mod error;
pub mod models;
pub mod rng;
pub mod simplex;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};

/// Identifier of a conditioning context `x`; dense index into per-context
/// storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId(pub usize);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}
