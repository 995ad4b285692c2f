//! Reading volumes and manifests from disk and assembling four-channel
//! stacks.
//!
//! Inputs are expected to be preprocessed upstream (bias-corrected,
//! skull-stripped, registered to a common grid). Tissue probability maps are
//! taken verbatim when the manifest provides them; otherwise a Gaussian
//! mixture segmenter stands in.

pub mod manifest;
pub mod nifti;
pub mod segment;
mod stack;

pub use manifest::{read_manifest, resolve_path, write_manifest, ManifestError, ManifestLoad};
pub use nifti::{read_nifti_volume, write_nifti_volume, NiftiDatatype, NiftiError, NiftiHeaderInfo};
pub use segment::{fallback_tissue_segmentation, SegmentationError, TissueMaps};
pub use stack::{assemble_modality_stack, load_subject, zscore_nonzero, AssembledStack, IngestError};
