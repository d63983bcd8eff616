//! Experiment orchestration for the freqlab laboratory: configuration,
//! dataset ingestion, reproducible run directories and tabular outputs.

pub mod config;
pub mod dataset;
pub mod manifest;
pub mod pool;
pub mod runner;
