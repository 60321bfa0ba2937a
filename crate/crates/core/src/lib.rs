//! Progressive margin loss for long-tailed ordinal classification (age
//! estimation), with label-distribution encoding, streaming class
//! statistics, learned margins and a curriculum over class imbalance.

pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod error;
pub mod label;
pub mod loss;
pub mod margin;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stats;
pub mod train;

pub use error::{Error, ErrorKind, Result};
