//! Desk-scale mixture-of-experts training lab.
//!
//! The crate is organized around five subsystems:
//!
//! - [`numerics`]: a dense f64 tensor tape with reverse-mode autodiff and the
//!   transformer building blocks (attention, FFN, layer norm).
//! - [`gating`]: routing functions — Top-K, hash routing, and the
//!   dense-to-sparse gate with temperature annealing and the balance loss.
//! - [`moe`]: the expert network — shared-expert mode, random-mask expert
//!   spawning, sparse dispatch/combine, and FLOPs/parameter accounting.
//! - [`trainer`]: the two-phase training loop, optimizer, synthetic corpora,
//!   checkpointing, and routing-statistics logging.
//! - [`epsim`]: a trace-driven simulator for expert-parallel all-to-all
//!   communication and straggler makespan.

pub mod epsim;
mod error;
pub mod gating;
pub mod moe;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
