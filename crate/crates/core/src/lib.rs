//! Discrete-time survival modeling with mixture-of-experts heads.

pub mod cluster;
pub mod data;
pub mod error;
pub mod heads;
pub mod math;
pub mod metrics;
pub mod model;
pub mod mtlr;
pub mod parallel;
pub mod params;
pub mod runner;
pub mod train;

pub use error::{Error, Result};
