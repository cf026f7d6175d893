//! Hierarchical training of dense Leaky-ReLU networks.
//!
//! The crate grows a small feed-forward network during training instead of
//! fixing the architecture up front. Whenever the optimizer stalls, a small
//! extension network is initialized by maximizing the inner product between
//! the current residual and the extension's response under a unit-norm
//! constraint, scaled by an explicit step rule, and merged into the host
//! network through a realization-preserving direct sum. Homogeneity of the
//! activation makes both the normalization and the silent entry of new
//! neurons exact.
//!
//! Module map:
//! - [`net`]: architectures, weights, realization and the weight calculus
//!   (scaling, direct sums, final-layer splits, hat networks).
//! - [`loss`]: weighted least-squares loss with an optional linear output
//!   operator, residuals and the quadratic expansion identities.
//! - [`optim`]: exact gradients, full-batch Adam with backtracking, stall
//!   detection and a stationarity polish.
//! - [`growth`]: the extension search, step rules, the inner extension loop,
//!   the outer adaptive loop and partial-layer variants.
//! - [`diagnostics`]: computable optimality and stability indicators plus a
//!   generalization estimator.
//! - [`trace`]: per-round run records, CSV emission and rate fitting.
//! - [`harness`]: dataset builders, experiment configuration and the
//!   hierarchical-vs-direct comparison runner.
//!
//! The `netgrow` binary exposes the harness as `run`, `rate`, `diag` and
//! `dataset` subcommands; the `examples/` directory shows one runnable
//! program per capability.

pub mod diagnostics;
pub mod error;
pub mod growth;
pub mod harness;
pub mod loss;
pub mod net;
pub mod optim;
pub mod trace;

pub use error::{Error, Result};
