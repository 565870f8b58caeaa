//! Session orchestration for the time-series explainability workbench:
//! configuration, the on-disk session store, the automatic pipeline, the
//! exploration queries behind the HTTP API, and the API itself.

pub mod api;
pub mod config;
pub mod error;
pub mod explore;
pub mod jobs;
pub mod pipeline;
pub mod store;

pub use error::{Result, ServerError};
