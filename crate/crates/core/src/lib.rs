//! Backdoor watermarking of image classifiers and inference-time wrappers that
//! detect and neutralize trigger-set queries.
//!
//! Pipeline: [`data`] ingestion → [`model`] training → [`watermarking`]
//! (key generation, marking, verification) → wrappers in [`defense`] →
//! experiment orchestration and reporting in [`harness`].

pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod util;
pub mod watermarking;

pub use error::{Error, Result};
