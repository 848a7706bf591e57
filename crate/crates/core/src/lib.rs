#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Deep BSDE solver for high-dimensional semilinear parabolic PDEs.
//!
//! A semilinear PDE with terminal condition `u(T, x) = g(x)` is recast as a
//! backward stochastic differential equation. The solution value `u(0, ξ)`
//! becomes a trainable scalar, the gradient process along simulated forward
//! paths is produced by one small batch-normalized network per time step, and
//! all parameters are trained jointly by minimizing the squared mismatch
//! between the simulated terminal value and `g(X_T)`.
//!
//! Module map:
//!
//! - [`diffnet`]: parameter layout, batch normalization and the reverse-mode tape.
//! - [`sde`]: time grids, Brownian increments and forward schemes.
//! - [`bsde`]: the rollout, terminal-mismatch loss and its gradient.
//! - [`optim`]: SGD, Adam and learning-rate schedules.
//! - [`problems`]: the benchmark equations.
//! - [`oracles`]: independent reference values (branching diffusion, Cole–Hopf
//!   Monte Carlo, closed forms).
//! - [`harness`]: multi-run training experiments and report emission.

pub mod bsde;
pub mod diffnet;
mod error;
pub mod harness;
pub mod optim;
pub mod oracles;
pub mod problems;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
