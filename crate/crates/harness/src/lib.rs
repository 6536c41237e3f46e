//! Dataset records, run configuration, training, evaluation and plotting
//! around the models in `snp-core`.

mod bin;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod record;
pub mod train;

pub use error::{HarnessError, Result};
