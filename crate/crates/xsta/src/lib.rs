//! Cross-lingual extractive QA with gradient-disentangled knowledge
//! sharing, teacher-guided output calibration, and multi-granularity
//! alignment, on a from-scratch transformer encoder with tape-based
//! reverse-mode autodiff.

pub mod alignment;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod gdks;
pub mod gradcheck;
pub mod model;
pub mod mrc;
pub mod params;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
