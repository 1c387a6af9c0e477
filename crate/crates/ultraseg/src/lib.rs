//! File formats, dataset ingestion, evaluation reports, benchmarking and
//! the `useg` command line on top of [`ultraseg_core`].

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod run;

pub use error::{Error, Result};
pub use ultraseg_core as core;
