//! Run configuration, file formats, checkpoints and text reports.

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use report::Summary;
