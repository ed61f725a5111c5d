//! ConvRec: attribute-aware sequential recommendation with hierarchical
//! down-scaling 1D convolutions.

pub mod bench;
pub mod cds;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
