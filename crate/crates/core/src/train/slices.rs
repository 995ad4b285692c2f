//! 2D slice protocols: the leaky slice-level split and its subject-level
//! counterpart, run on the same slices with the same model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::cv::Prediction;
use super::metrics::{compute_metrics, Metrics};
use super::{predict, train_fold, Dataset, Sample, TrainError, TrainingConfig};
use crate::model::{ModelConfig, NetworkParameters};
use crate::splits::{
    audit_leakage, slice_level_split, subject_level_holdout, LeakageReport, Partition, SliceAssignment, SliceKey,
    SliceMode, StratifyOn,
};
use crate::types::{Modality, ModalityStack, SubjectRecord, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceConfig {
    /// 0 = sagittal, 1 = coronal, 2 = axial.
    pub axis: u8,
    pub modality: Modality,
    /// Slices whose nonzero fraction falls below this are dropped.
    pub min_brain_fraction: f64,
    /// Train, validation and test shares.
    pub fractions: [f64; 3],
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig { axis: 2, modality: Modality::T1, min_brain_fraction: 0.10, fractions: [0.70, 0.15, 0.15] }
    }
}

/// 2D extent of a slice taken perpendicular to `axis`.
pub fn slice_dims(dims: [usize; 3], axis: u8) -> [usize; 3] {
    match axis {
        0 => [dims[1], dims[2], 1],
        1 => [dims[0], dims[2], 1],
        _ => [dims[0], dims[1], 1],
    }
}

/// Every slice of `grid` perpendicular to `axis` with at least
/// `min_fraction` nonzero voxels, as `(index, values)`.
pub fn extract_slices(grid: &VolumeGrid, axis: u8, min_fraction: f64) -> Vec<(usize, Vec<f32>)> {
    let [nx, ny, nz] = grid.dims();
    let n = [nx, ny, nz][axis as usize];
    (0..n)
        .filter_map(|i| {
            let values: Vec<f32> = match axis {
                0 => (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).map(|(y, z)| grid.get(i, y, z)).collect(),
                1 => (0..nz).flat_map(|z| (0..nx).map(move |x| (x, z))).map(|(x, z)| grid.get(x, i, z)).collect(),
                _ => (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| grid.get(x, y, i)).collect(),
            };
            let nonzero = values.iter().filter(|&&v| v != 0.0).count();
            (nonzero as f64 >= min_fraction * values.len() as f64).then_some((i, values))
        })
        .collect()
}

/// Class index of a subject for a head with `classes` outputs: binary for
/// two, the fine-grained CDR grade for four.
pub fn class_of(record: &SubjectRecord, classes: usize) -> usize {
    if classes == 2 {
        record.label().value().index()
    } else {
        record.label().fine_grained().index()
    }
}

pub fn slice_id(key: &SliceKey) -> String {
    format!("{}/{}{}", key.subject_id, ["x", "y", "z"][key.axis as usize], key.index)
}

/// One sample per kept slice of every subject, in subject then index order.
pub fn build_slice_dataset(
    cohort: &[(SubjectRecord, ModalityStack)],
    cfg: &SliceConfig,
    classes: usize,
) -> Result<(Dataset, Vec<SliceKey>), TrainError> {
    let (_, first) = cohort.first().ok_or(TrainError::EmptySet("slice cohort"))?;
    if cfg.axis > 2 {
        return Err(TrainError::Config(format!("slice axis must be 0, 1 or 2, got {}", cfg.axis)));
    }
    let dims = slice_dims(first.dims(), cfg.axis);
    let mut samples = Vec::new();
    let mut keys = Vec::new();
    for (record, stack) in cohort {
        let label = class_of(record, classes);
        for (index, data) in extract_slices(stack.channel(cfg.modality), cfg.axis, cfg.min_brain_fraction) {
            let key = SliceKey { subject_id: record.subject_id.clone(), axis: cfg.axis, index };
            samples.push(Sample { id: slice_id(&key), label, data });
            keys.push(key);
        }
    }
    Ok((Dataset::new(1, dims, samples)?, keys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSize {
    pub slices: usize,
    pub subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub mode: SliceMode,
    pub seed: u64,
    pub train: PartitionSize,
    pub val: PartitionSize,
    pub test: PartitionSize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
    pub audit: LeakageReport,
    /// False whenever the audit found shared subjects, which the slice-level
    /// diagnostic does by design.
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct SliceOutcome {
    pub assignment: SliceAssignment,
    pub report: SliceReport,
    pub model: NetworkParameters<f32>,
}

/// Partition the cohort's slices under `mode`, train the 2D model on the
/// training slices (checkpointing on validation), and score the test slices.
/// The subject-level protocol aborts on a dirty audit; the slice-level one
/// records the audit and proceeds, since leaking is its purpose.
pub fn run_slice_protocol(
    cohort: &[(SubjectRecord, ModalityStack)],
    mode: SliceMode,
    slice_cfg: &SliceConfig,
    seed: u64,
    stratify_on: StratifyOn,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
) -> Result<SliceOutcome, TrainError> {
    let classes = model_cfg.n_classes;
    let (data, keys) = build_slice_dataset(cohort, slice_cfg, classes)?;
    let assignment = match mode {
        SliceMode::SliceLevel => slice_level_split(&keys, slice_cfg.fractions, seed)?,
        SliceMode::SubjectLevel => {
            let records: Vec<SubjectRecord> = cohort.iter().map(|(r, _)| r.clone()).collect();
            let (plan, _) = subject_level_holdout(&records, slice_cfg.fractions, seed, stratify_on)?;
            SliceAssignment::from_fold(&keys, &plan.folds[0])
        }
    };
    let audit = audit_leakage(&assignment);
    if mode == SliceMode::SubjectLevel && !audit.clean {
        return Err(TrainError::Leakage(audit));
    }

    let index: HashMap<&SliceKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let part = |p: Partition| -> (Dataset, PartitionSize) {
        let mut idx: Vec<usize> = assignment.partition(p).map(|k| index[k]).collect();
        idx.sort_unstable();
        let mut subjects: Vec<&str> = assignment.partition(p).map(|k| k.subject_id.as_str()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        (data.subset(&idx), PartitionSize { slices: idx.len(), subjects: subjects.len() })
    };
    let (train, train_size) = part(Partition::Train);
    let (val, val_size) = part(Partition::Val);
    let (test, test_size) = part(Partition::Test);
    if test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    log::info!(
        "{mode:?}: {} / {} / {} slices from {} / {} / {} subjects",
        train_size.slices,
        val_size.slices,
        test_size.slices,
        train_size.subjects,
        val_size.subjects,
        test_size.subjects
    );

    let trained = train_fold(&train, &val, model_cfg, train_cfg)?;
    let probs = predict(&trained.params, &test, train_cfg.batch_size.max(16))?;
    let truth: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&truth, &probs, classes)?;
    let predictions = test
        .samples
        .iter()
        .zip(probs.chunks_exact(classes))
        .map(|(s, p)| Prediction { id: s.id.clone(), fold: 0, truth: s.label, probs: p.to_vec() })
        .collect();
    let c = trained.curves;
    let valid = audit.clean;
    let report = SliceReport {
        mode,
        seed,
        train: train_size,
        val: val_size,
        test: test_size,
        best_epoch: c.best_epoch,
        stopped_early: c.stopped_early,
        train_loss: c.train_loss,
        val_loss: c.val_loss,
        metrics,
        predictions,
        audit,
        valid,
    };
    Ok(SliceOutcome { assignment, report, model: trained.params })
}
