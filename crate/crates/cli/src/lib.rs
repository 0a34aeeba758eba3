//! Pipeline orchestration for the `hcae` command-line tool.
//!
//! Each subcommand is one stage. Stages read a [`config::RunConfig`], write
//! into a [`workspace::Workspace`] and append a [`workspace::StageRecord`] to
//! the workspace manifest.

pub mod config;
pub mod error;
pub mod stages;
pub mod workspace;

pub use config::RunConfig;
pub use error::CliError;
pub use workspace::{StageRecord, Workspace};
