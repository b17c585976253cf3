//! Command-line companion to `casa-core`: CSV ingestion, run configuration,
//! checkpoints, reports and the scaling benchmark.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod report;

pub use error::CliError;

#[global_allocator]
static ALLOC: bench::TrackingAllocator = bench::TrackingAllocator;
