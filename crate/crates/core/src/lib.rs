//! Weakly supervised audio-visual anomaly detection on precomputed clip
//! features.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`numerics`]), the cross-attention fusion network ([`model`]), the
//! multiple-instance objectives ([`objectives`]), feature and manifest I/O
//! with a synthetic generator ([`datahub`]), training ([`trainer`]),
//! evaluation ([`eval`]) and the command-line front end ([`cli`]).

pub mod cli;
pub mod datahub;
mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
