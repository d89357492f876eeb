//! Files, experiment harness and command-line front end around
//! [`twinproto_core`].
//!
//! - [`archive`]: dataset archives (JSON manifest plus a raw f64 blob).
//! - [`checkpoint`]: model checkpoint files.
//! - [`config`]: TOML experiment configuration, profiles and overrides.
//! - [`harness`]: scenario matrix, ablation variants, top-k sweep.
//! - [`report`]: CSV, markdown and JSON-lines outputs.

pub mod archive;
pub mod checkpoint;
pub mod config;
mod error;
pub mod harness;
pub mod report;

pub use error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TWINPROTO_OUT";
