//! File formats, dataset IO, the command line and the HTTP service around
//! `pneunet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod infer;
pub mod plot;
pub mod report;
pub mod service;

pub use error::{Error, Result};
