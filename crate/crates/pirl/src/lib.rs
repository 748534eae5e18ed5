//! Std companion to `pirl-core`: file formats, run configuration and the
//! multi-variant experiment harness behind the `pirl` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use error::{Error, Result};
