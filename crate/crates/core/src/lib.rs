//! In-context linear regression with multilayer and looped linear-attention models.
//!
//! The crate is organized bottom-up:
//!
//! - [`instances`]: realizable regression instances, prompts and covariance laws;
//! - [`attention`]: forward passes of the restricted and unrestricted models;
//! - [`constructions`]: Chebyshev, gradient-descent and Newton–Schulz weights;
//! - [`losses`]: exact trace-formula loss, Monte-Carlo loss and gradients;
//! - [`training`]: optimizers over the exact or sampled loss;
//! - [`analysis`]: lower-bound probes, termination, robustness and monotonicity;
//! - [`weights_io`]: the binary weight format.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod constructions;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod losses;
pub mod par;
pub mod rng;
pub mod training;
pub mod weights_io;

pub use error::{IclError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
