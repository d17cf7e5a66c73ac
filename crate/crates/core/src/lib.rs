//! Multi-level conflict-aware network for multimodal sentiment regression,
//! with its own reverse-mode autodiff and SVD.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod conflict;
pub mod data;
pub mod decomposition;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
