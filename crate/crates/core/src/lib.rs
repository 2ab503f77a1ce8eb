//! Retinal vessel segmentation with multi-scale large-patch training.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`dataset`] – DRIVE, CHASE_DB1 and HRF layouts, official splits and FOV masks.
//! 2. [`sampler`] – random multi-scale crops with geometric and photometric augmentation.
//! 3. [`nets`] – U-Net baseline, Simple Baseline ladder and the VLight network on a small CPU engine.
//! 4. [`training`] – BCE loss, Adam, step learning-rate schedule and bit-exact checkpoints.
//! 5. [`inference`] – overlapped tiling, multi-scale averaging and binarization.
//! 6. [`metrics`] – FOV-restricted F1/ACC/SE/SP and ROC/PR areas.
//! 7. [`config`] – the structured-text run configuration shared by the CLI.

pub mod config;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod nets;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
