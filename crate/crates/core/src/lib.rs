#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod imitation;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod policy;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
