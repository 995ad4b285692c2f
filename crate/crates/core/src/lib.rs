//! Leakage-aware volumetric MRI classification.
//!
//! The crate covers the whole desk-scale pipeline: synthetic phantom
//! cohorts, NIfTI and manifest ingestion, subject-level fold planning with
//! leakage auditing, a multi-modal late-fusion 3D CNN (plus a 2D slice
//! variant), training and evaluation, and GradCAM saliency.

pub mod ingest;
pub mod model;
pub mod phantom;
pub mod saliency;
pub mod splits;
pub mod train;
pub mod types;

pub use types::*;
