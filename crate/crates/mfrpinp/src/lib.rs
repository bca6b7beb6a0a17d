//! File formats, experiment orchestration and the command-line front end
//! for the `mfrpinp-core` estimator.

pub mod artifacts;
pub mod bench;
pub mod calibrate;
pub mod concurrent;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
