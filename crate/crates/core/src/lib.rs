//! Point-supervised temporal action localization with completeness learning.
//!
//! The pipeline: a convolutional scoring head ([`model`]) trained from
//! point labels ([`losses`], [`mining`]) plus dense pseudo-labels found by a
//! budgeted search over label sequences ([`sequence`]); proposals are
//! produced by thresholding and outer-inner contrast ([`inference`]) and
//! scored by temporal mAP ([`metrics`]).

pub mod cli;
pub mod config;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod ndiff;
pub mod report;
pub mod sequence;
pub mod synthio;
pub mod trainer;

pub use error::{Error, Result};
