//! Library side of the `sfgeo` command: configuration, stage drivers and the
//! synthetic corpus used by demos and the acceptance suite.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod stages;

pub use config::PipelineConfig;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Process exit status for any error.
pub const EXIT_ERROR: i32 = 1;
/// Process exit status when renders wait for external completion jobs.
pub const EXIT_PENDING: i32 = 3;
