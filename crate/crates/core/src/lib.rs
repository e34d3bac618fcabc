//! Sparse signal recovery from sign-quantized (1-bit) measurements.
//!
//! The crate is organised bottom-up:
//!
//! - [`sensing`]: problem generation, the sign quantizer and recovery metrics.
//! - [`fpc`]: the iterative fixed-point continuation solver with the one-sided
//!   l1 consistency penalty.
//! - [`unfolded`]: the same iteration unrolled into a trainable network, with
//!   exact reverse-mode gradients and a binary model format.
//! - [`trainer`]: ADAM, layer-wise progressive training and tanh sharpness
//!   continuation.
//! - [`doa`]: direction-of-arrival estimation on a uniform linear array from
//!   1-bit snapshots, plus a MUSIC baseline.
//! - [`experiments`]: seeded, CSV-producing experiment drivers used by the CLI
//!   and the acceptance suite.

pub mod doa;
pub mod error;
pub mod experiments;
pub mod fpc;
pub mod rng;
pub mod sensing;
pub mod trainer;
pub mod unfolded;

mod par;

pub use error::{Error, Result};
pub use rng::RngSeed;
