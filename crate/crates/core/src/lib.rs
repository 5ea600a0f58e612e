// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prototype-guided steering of per-head query codes in a small decoder-only
//! language model.

pub mod acts;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod microlm;
pub mod pipeline;
pub mod proto;
pub mod sae;
pub mod seeds;
pub mod source;
pub mod steering;
pub mod stylegen;

pub use error::{Error, Result};
