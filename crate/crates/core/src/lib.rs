//! Nonparametric inference for factorial survival designs.
//!
//! Null hypotheses are stated on the cumulative hazards, `H A = 0` for a
//! contrast matrix `H`. Deviations are measured by a Wald-type quadratic form
//! in weighted Nelson–Aalen integrals that combines several polynomial
//! weights (log-rank and a crossing-hazard weight by default). Critical
//! values come either from the chi-square limit or from a studentized
//! permutation scheme that is exact under exchangeability.
//!
//! Module map:
//!
//! - [`survdata`]: observations, factorial layouts, CSV ingestion
//! - [`linalg`]: small dense matrices, pseudoinverse, contrasts
//! - [`counting`]: counting and at-risk processes, Nelson–Aalen, pooled Kaplan–Meier
//! - [`weights`]: polynomial weights and the weighted integrand
//! - [`statistic`]: the Wald-type statistic and chi-square p-values
//! - [`permutation`]: the permutation test
//! - [`theory`]: limit quantities, noncentrality and power prediction
//! - [`analysis`]: every effect of a dataset in one report
//! - [`simulate`]: Monte-Carlo studies of size and power
//! - [`cli`]: the command-line front end

pub mod analysis;
pub mod cli;
pub mod counting;
mod error;
pub mod laws;
pub mod linalg;
mod numeric;
pub mod permutation;
pub mod rng;
pub mod simulate;
pub mod statistic;
pub mod survdata;
pub mod theory;
pub mod weights;

pub use error::{Error, Result};

/// Identifier of the tie convention used by [`counting`], written into reports.
pub const TIE_CONVENTION: &str = "risk-set-geq/distinct-time-km-left";
