//! File formats, dataset preparation and the `seqsleep` command line on top
//! of `seqsleep-core`.

pub mod blob;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod edf;
pub mod error;
pub mod report;

pub use error::{Error, Result};
