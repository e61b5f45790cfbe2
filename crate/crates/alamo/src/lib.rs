//! Desk-scale multi-organ volumetric segmentation pipeline.
//!
//! The crate covers the full path from synthetic data to evaluated
//! segmentations: volume I/O and preprocessing (`volume`, `mvol`),
//! phantom generation (`phantom`), training-time augmentation
//! (`augment`), a minimal reverse-mode differentiable engine with
//! DenseUnet/PlainUnet architectures (`nn`), the training loop
//! (`train`), sliding-slab multi-view inference with majority-vote
//! fusion (`infer`), overlap and surface-distance metrics plus paired
//! significance testing (`metrics`), and self-check suites (`verify`).
//!
//! Everything is deterministic under an explicit seed; see [`rng`] for
//! the fixed generator contract.

pub mod augment;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod mvol;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
