//! Instrumental-variable representation learning for multi-label image
//! classification, with a synthetic confounded benchmark.

pub mod backbone;
pub mod causalhead;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod image;
pub mod ingest;
pub mod ivlearn;
pub mod layers;
pub mod metrics;
pub mod miconstraint;
pub mod model;
pub mod rng;
pub mod scmgen;
pub mod semfuse;
pub mod train;

pub use error::{Error, Result};
