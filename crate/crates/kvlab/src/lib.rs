//! Command-line side of the KV eviction laboratory: config files,
//! checkpoints, evaluation tasks, parallel sweeps and reports. All
//! algorithms live in `kvlab_core`.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod sweep;
pub mod tasks;
pub mod train;
