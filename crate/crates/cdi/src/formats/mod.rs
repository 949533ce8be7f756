//! On-disk formats.

pub mod cdie;
pub mod checkpoint;
pub mod dataset;
pub mod eventlog;
pub mod runlog;
