//! Memory-based semi-supervised video object segmentation, desk scale.
//!
//! The crate covers the full loop: DAVIS-style dataset IO, instance-mask
//! ingestion and motion-blur augmentation, a small query/memory segmentation
//! network with object transformer blocks, frame-by-frame propagation with
//! test-time augmentation, J/F evaluation, and a two-stage training driver.
//! All numerics are double precision and every differentiable block is
//! finite-difference checked in the test suite.

pub mod augment;
pub mod data_io;
pub mod error;
pub mod imgops;
pub mod infer;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod tape;
pub mod train;

pub use error::{PipelineError, Result};
