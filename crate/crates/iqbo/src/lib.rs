//! Indirect-query Bayesian optimization.
//!
//! The optimizer never evaluates the objective `f` over its input space
//! directly. Instead it picks queries `a` in a transformed space and observes
//! noisy conditional expectations `z = E[f(X) | A = a] + eps`. The library
//! provides:
//!
//! * exact Gaussian-process regression with squared-exponential kernels
//!   ([`kernel`]),
//! * conditional mean process machinery that turns a matched dataset
//!   `{(x_j, a_j)}` plus the aggregate observations into posteriors over both
//!   `f` and its conditional expectation `g` ([`cmp`]),
//! * the conditional max-value entropy-search acquisition and indirect-query
//!   adaptations of MES / UCB / EI ([`acquisition`]),
//! * a budgeted multi-resolution tree search that trades query resolution
//!   against cost ([`tree`]),
//! * synthetic benchmark environments with quadrature oracles and regret
//!   bookkeeping ([`envs`]),
//! * a reproducible experiment runner emitting plot-ready CSV/JSON
//!   ([`runner`]).
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod acquisition;
pub mod cmp;
pub mod envs;
pub mod kernel;
pub mod runner;
pub mod stats;
pub mod tree;

mod error;

pub use error::{Error, Result};

/// Pointwise posterior variances are clamped at this floor before any square
/// root is taken; acquisition ratios divide by the resulting standard
/// deviation.
pub const VARIANCE_FLOOR: f64 = 1e-12;
