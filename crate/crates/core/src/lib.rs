//! Attention-based policies over sets of discrete sub-actions.
//!
//! The crate bundles a small reverse-mode autodiff substrate ([`compute`]),
//! the set-attention policy and its baselines ([`policy`]), the
//! combinatorial navigation benchmark ([`cone`]), weighted log-likelihood
//! training objectives ([`rl`]) and an experiment runner ([`harness`]).

pub mod compute;
pub mod cone;
pub mod error;
pub mod harness;
pub mod policy;
pub mod rl;

pub use error::{Error, Result};
