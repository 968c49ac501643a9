//! Multi-stage layerwise training (MSLT) of BERT-style encoders.
//!
//! The crate trains small post-layernorm encoders under three regimes
//! (layerwise staging, progressive stacking, joint training from scratch),
//! keeps frozen layers out of the backward pass entirely, and reports the
//! analytic compute / communication cost and attention drift of each run.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
