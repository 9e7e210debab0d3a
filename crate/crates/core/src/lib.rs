//! Distilling a frozen promptable segmentation model into a compact binary
//! segmentation decoder for one landform class.

pub mod data;
pub mod decoder;
pub mod digest;
pub mod error;
pub mod gateway;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod prompt;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::BinaryMask;
