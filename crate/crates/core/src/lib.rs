//! Target / non-target knowledge distillation laboratory.
//!
//! Losses with hand-derived gradients ([`losses`]), a small MLP with manual
//! backprop ([`models`]), datasets ([`data`]), deterministic training loops
//! ([`training`]) and the experiment drivers behind the `nkd` binary.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
