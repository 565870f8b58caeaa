//! Explainability engine for univariate time-series classifiers.
//!
//! The crate covers the numeric side of the workbench: dataset ingestion,
//! a small 1-D CNN with reverse-mode gradients, local attribution methods,
//! perturbation-based ranking of those methods, series transformations,
//! 2-D projections with cluster scoring, counterfactual search and the
//! edit operations of the local what-if loop.

pub mod data;
pub mod error;
pub mod eval;
pub mod attributions;
pub mod counterfactuals;
pub mod nn;
pub mod projections;
pub mod seed;
pub mod transforms;
pub mod whatif;

pub use error::{Error, Result};
