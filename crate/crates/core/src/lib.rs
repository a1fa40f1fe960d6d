//! Retentive decision transformer with adaptive causal masking.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod retention;
pub mod simulator;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
