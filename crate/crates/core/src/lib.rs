//! Subgroup audits for black-box classifiers: subgroup metrics with
//! bootstrap intervals, balanced test-set resampling, linear probing of
//! frozen features, a synthetic task-relationship testbed, feature-space
//! inspection and marginal-distribution testing.

pub mod audit;
pub mod cohort;
pub mod error;
pub mod fsutil;
pub mod inspect;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod resample;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod svg;

pub use error::{Error, Result};
