//! Right-truncated Poisson regression, unicomponent and finite mixture.
//!
//! Counts live on `{0, ..., threshold}`; each mixture component has its own
//! log-linear rate `exp(x' beta_j)` and the components share constant mixing
//! weights. Mixtures are fitted by EM with a BFGS M-step.

pub mod data;
pub mod diagnostics;
pub mod kmeans;
pub mod mixture;
pub mod error;
pub mod inference;
pub mod io;
pub mod optimizer;
pub mod rtpr;
pub mod selection;
pub mod simlab;
pub mod truncdist;

pub use data::{CovariateBlock, Dataset};
pub use error::{Error, Result};
pub use truncdist::{mixture_moments, PoissonPartialSum, TruncatedPoisson};
