//! Two-stage facial-expression analysis on synthetic factor data.
//!
//! Stage one ([`normalizer`]) maps an original sample and a target sample to
//! a normalized sample that keeps the original's expression and the target's
//! identity, pose and background. Stage two ([`classifier`]) reads both the
//! normalized and the original stream through identity-specific
//! mixture-of-experts blocks. Everything runs on a small reverse-mode engine
//! ([`diffcore`]) whose gradients are verified against finite differences.

pub mod attention;
pub mod classifier;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod moe;
pub mod normalizer;
pub mod synthdata;

pub use diffcore::{Graph, Params, Rng, Tensor, Var};
pub use error::{Error, Result};
