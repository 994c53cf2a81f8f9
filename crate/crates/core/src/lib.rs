//! Hybrid selective-state-space / mixture-of-experts / rotary grouped-query
//! attention decoder for speech-driven 3D facial animation.

pub mod ablate;
pub mod attention;
pub mod audio;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod motion;
pub mod nn;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
