//! Ladder-side tuning for segmentation: a frozen patch-embedding vision
//! transformer and a small trainable residual CNN run side by side, their
//! feature maps are mixed by one learnable scalar gate, and a partially
//! trainable upscaling head decodes per-pixel class logits.

pub mod nn;
pub mod param;
pub mod tensor;
pub mod backbone;
pub mod datapipe;
pub mod decoder;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod error;
pub mod side_encoder;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
