//! Scenario files, trace and plan formats, reports and the `memfine` command line
//! on top of [`memfine_core`].

pub mod cli;
pub mod error;
pub mod formats;
pub mod io;
pub mod manifest;
pub mod report;
pub mod scenario;
pub mod verify;

pub use error::{Exit, Result, RunError};
