//! File formats, run orchestration and the command-line tool built on
//! `hiersoc-core`.

pub mod checkpoint;
pub mod cli;
pub mod clipfile;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use error::{Error, Result};
pub use hiersoc_core as core;
