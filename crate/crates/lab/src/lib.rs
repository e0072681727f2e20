//! File formats, the experiment pipeline and the `gas` command line built on
//! `gas-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod kv;
pub mod pipeline;
pub mod report;
pub mod settings;
pub mod verify;

pub use error::{LabError, Result};
