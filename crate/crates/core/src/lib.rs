//! Tools for studying how the choice of negative-phase estimator shapes the
//! density an energy-based model learns.
//!
//! Three estimators for the maximum-likelihood gradient are implemented and
//! cross-examined on low-dimensional Gaussian-mixture targets:
//!
//! * short-run Langevin Monte Carlo with a replay buffer ([`sampler`]),
//! * exact Riemann-sum / self-normalized importance sampling ([`estimate`]),
//! * uniform support partitioning with persistent stochastic updates ([`usp`]).
//!
//! The [`eval`] module carries the out-of-distribution metrics (FPR at fixed
//! TPR, area under the precision-recall curve), mode-mass analysis, and the
//! thin-shell concentration check. Everything is deterministic given a seed:
//! all randomness flows through explicitly seeded ChaCha streams and all
//! parallel reductions use a fixed chunk decomposition.
//!
//! The `ebmlab` binary (see [`cli`]) runs config-driven experiments and emits
//! CSV/JSON artifacts suitable for plotting.


pub mod dist;
pub mod error;
pub mod estimate;
pub mod eval;


pub mod model;
pub mod numeric;
pub mod sampler;
pub mod usp;


pub use error::{Error, Result};
