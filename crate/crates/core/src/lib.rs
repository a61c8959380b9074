//! Volumetric lesion segmentation with transferable encoders.
//!
//! The crate provides a 3D encoder-decoder network with hand-written
//! backpropagation, a dual-encoder variant whose bottleneck features are
//! combined by channel-wise soft attention, the transfer strategies that
//! initialize and freeze those networks from pre-trained checkpoints, and the
//! data, metric and experiment plumbing around them.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optimization;
pub mod params;
pub mod tensor;
pub mod transfer;
pub mod volume;

pub use error::{Error, Result};
