//! Few-shot industrial defect segmentation: support/query feature matching
//! refined with zero-shot mask proposals.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fusion;
pub mod mask;
pub mod maskops;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod proposals;
pub mod synthetic;

pub use error::{Error, Result};
pub use mask::BinaryMask;
