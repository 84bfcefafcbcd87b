//! Experiment harness around `flap-core`: configuration files, versioned
//! checkpoints and task sets, metrics export, timing, experiment runners and
//! the `flap` command line.

pub mod config;
pub mod error;
pub mod experiments;
pub mod files;
pub mod metrics;
pub mod report;
pub mod timing;

pub use error::{FlapError, Result};
pub use flap_core;
