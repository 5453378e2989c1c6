//! Numerical laboratory for asynchronous SGD and its continuous-time
//! approximation by stochastic differential delay equations.
//!
//! * [`problems`]: finite-sum objectives and mini-batch noise statistics.
//! * [`discrete`]: ASGD, SGD and the Gaussian surrogate recursion.
//! * [`sdde`]: Euler–Maruyama for the delay equation and path coupling.
//! * [`analytic`]: Ornstein–Uhlenbeck moments, characteristic roots, bounds.
//! * [`harness`]: reproducible Monte-Carlo studies.
//! * [`cli`]: configuration files and the command-line front end.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod discrete;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod problems;
pub mod sdde;
pub mod streams;
pub mod trajectory;

pub use error::{Error, Result};
