//! GaitASMS: gait recognition from silhouette sequences.
//!
//! Adaptive edge-mask spatial extraction (ASRE), multi-scale dilated
//! temporal aggregation (MSTA), a GeM recognition head with per-strip
//! embeddings, batch-all triplet training, and subject-level random-mask
//! augmentation, all on a self-contained f64 autodiff tensor core.
//! Verifiable at desk scale on synthetic silhouette data and on
//! CASIA-B-layout directories.

pub mod asre;
pub mod data;
pub mod error;
pub mod head;
pub mod loss;
pub mod msta;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
