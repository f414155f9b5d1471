//! Outfit compatibility as regression and mismatching-item detection.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic garment
//! universe, MISFIT (partially mismatching outfit) generation, contrastive
//! image-text pre-training of small encoders, the VICTOR set transformer,
//! and the evaluation suite used to select checkpoints.

pub mod catalog;
pub mod error;
pub mod eval;
pub mod flip;
pub mod misfit;
pub mod numeric;
pub mod victor;

pub use error::{Error, Result};
