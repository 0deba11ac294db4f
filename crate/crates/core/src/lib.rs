//! Map-based path loss modeling toolkit.
//!
//! Surface-model corridors around each radio link are turned into CNN input
//! images in one of three layouts ([`profile::ConfigKind`]), a small CNN is
//! trained with leave-one-region-out cross-validation and ensembled, and
//! per-region link statistics feed an exhaustive-subset regression.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod geodata;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
