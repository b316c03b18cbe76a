//! Estimation of semiparametric nonlinear mixed-effects models.
//!
//! The parametric part is fitted by stochastic-approximation EM (ML or REML)
//! and the unknown shape function by a weighted l1 dictionary regression
//! refreshed inside every SAEM iteration.

pub mod dictionary;
pub mod error;
pub mod harness;
pub mod lasso;
pub mod model;
pub mod oracle;
pub mod reml;
pub mod rng;
pub mod saem;
pub mod semiparam;

pub use error::{Result, SnmmError};
