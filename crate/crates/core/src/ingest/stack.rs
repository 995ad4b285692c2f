use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::manifest::resolve_path;
use super::nifti::{read_nifti_volume, NiftiError};
use super::segment::{fallback_tissue_segmentation, SegmentationError};
use crate::types::{GridError, MaskGrid, Modality, ModalityStack, SubjectRecord, VolumeGrid};

/// Tissue maps whose channel sum strays further than this from one inside
/// the brain trigger a warning.
pub const TISSUE_SUM_TOLERANCE: f32 = 0.05;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("subject {0}: T1 volume is mandatory")]
    MissingT1(String),
    #[error("subject {subject}: {modality} dims {got:?} do not match T1 dims {expected:?}")]
    Alignment { subject: String, modality: Modality, expected: [usize; 3], got: [usize; 3] },
    #[error("subject {subject}: failed to read {modality} from {path}: {source}")]
    Read { subject: String, modality: Modality, path: String, source: NiftiError },
    #[error("subject {subject}: {source}")]
    Segmentation { subject: String, source: SegmentationError },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone)]
pub struct AssembledStack {
    pub stack: ModalityStack,
    /// Tissue channels synthesized by the fallback segmenter.
    pub segmented: Vec<Modality>,
    pub warnings: Vec<String>,
}

/// Z-score the nonzero voxels (mean and standard deviation taken over that
/// set); zero voxels are background and stay zero.
pub fn zscore_nonzero(t1: &VolumeGrid) -> VolumeGrid {
    let nz: Vec<f64> = t1.voxels().iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if nz.is_empty() {
        return t1.clone();
    }
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    let sd = (nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    t1.map(|v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) * scale) as f32 })
}

/// Build the `[T1, GM, WM, CSF]` stack for one subject from raw volumes.
/// Missing tissue maps are synthesized with the fallback segmenter (brain
/// mask = nonzero T1); provided maps are clipped to `[0, 1]`, never
/// renormalized.
pub fn assemble_modality_stack(
    record: &SubjectRecord,
    mut volumes: BTreeMap<Modality, VolumeGrid>,
) -> Result<AssembledStack, IngestError> {
    let subject = record.subject_id.clone();
    let t1 = volumes.remove(&Modality::T1).ok_or_else(|| IngestError::MissingT1(subject.clone()))?;
    for (&modality, grid) in &volumes {
        if !grid.same_geometry(&t1) {
            return Err(IngestError::Alignment { subject, modality, expected: t1.dims(), got: grid.dims() });
        }
    }

    let mut warnings = Vec::new();
    let mut segmented = Vec::new();
    let tissue = [Modality::GM, Modality::WM, Modality::CSF];
    let brain = MaskGrid::from_volume(&t1, |v| v != 0.0);
    if tissue.iter().any(|m| !volumes.contains_key(m)) {
        let maps = fallback_tissue_segmentation(&t1, &brain)
            .map_err(|source| IngestError::Segmentation { subject: subject.clone(), source })?;
        for (m, grid) in [(Modality::GM, maps.gm), (Modality::WM, maps.wm), (Modality::CSF, maps.csf)] {
            if let std::collections::btree_map::Entry::Vacant(e) = volumes.entry(m) {
                e.insert(grid);
                segmented.push(m);
            }
        }
    }

    let clipped: Vec<VolumeGrid> = tissue.iter().map(|m| volumes[m].map(|v| v.clamp(0.0, 1.0))).collect();
    let off = brain
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(i, &m)| {
            m && {
                let s: f32 = clipped.iter().map(|g| g.voxels()[i]).sum();
                (s - 1.0).abs() > TISSUE_SUM_TOLERANCE
            }
        })
        .count();
    if off > 0 {
        let msg = format!("subject {subject}: tissue maps deviate from unit sum by > {TISSUE_SUM_TOLERANCE} at {off} brain voxels");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let [gm, wm, csf]: [VolumeGrid; 3] = clipped.try_into().expect("three tissue channels");
    let stack = ModalityStack::new(subject, [zscore_nonzero(&t1), gm, wm, csf])?;
    Ok(AssembledStack { stack, segmented, warnings })
}

/// Read every referenced volume of `record` (paths resolved against `root`)
/// and assemble its stack.
pub fn load_subject(record: &SubjectRecord, root: &Path) -> Result<AssembledStack, IngestError> {
    let mut volumes = BTreeMap::new();
    for (&modality, cell) in &record.modality_paths {
        let path = resolve_path(root, cell);
        let grid = read_nifti_volume(&path).map_err(|source| IngestError::Read {
            subject: record.subject_id.clone(),
            modality,
            path: path.display().to_string(),
            source,
        })?;
        volumes.insert(modality, grid);
    }
    assemble_modality_stack(record, volumes)
}
