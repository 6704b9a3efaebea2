//! Restoration of bitonal manga screentones from degraded, resampled scans.

pub mod cli;
pub mod degradation;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod restorer;
pub mod scale_estimator;
pub mod screen_embedding;
pub mod screentone;
pub mod trainer;

pub use error::{Error, Result};
