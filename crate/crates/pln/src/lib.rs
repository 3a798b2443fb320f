//! File formats, run configuration and the command-line driver around
//! `pln-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod records;
pub mod report;
