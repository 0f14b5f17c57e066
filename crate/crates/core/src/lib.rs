//! Multipath-assisted indoor localization and tracking.

pub mod association;
pub mod estimator;
pub mod geometry;
pub mod pipeline;
pub mod signal;
pub mod tracking;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
