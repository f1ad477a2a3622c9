//! Cooperative range-only target localization with distributed information
//! consensus and greedy ellipsoid-volume control.

pub mod consensus;
pub mod control;
pub mod error;
pub mod linmodel;
pub mod metrics;
pub mod refine;
pub mod sensing;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
