use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_folds, compute_metrics, Metrics, Summary};
use super::{predict, train_fold, Dataset, TrainError, TrainingConfig};
use crate::model::{ModelConfig, NetworkParameters};
use crate::splits::{audit_leakage, stratified_subject_kfold, Fold, FoldPlan, LeakageReport, StratifyOn};
use crate::types::SubjectRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub stratify_on: StratifyOn,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { k: 5, seed: 0, val_fraction: 0.10, stratify_on: StratifyOn::Binary }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub fold: usize,
    pub truth: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Probability of any class other than 0 (NonDemented).
    pub fn p_demented(&self) -> f64 {
        1.0 - self.probs[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: Summary,
    pub roc_auc: Option<Summary>,
    pub macro_f1: Summary,
}

impl MetricSummary {
    pub fn from_folds(folds: &[FoldResult]) -> Option<Self> {
        let col = |f: fn(&Metrics) -> f64| folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
        let aucs: Option<Vec<f64>> = folds.iter().map(|r| r.metrics.roc_auc).collect();
        Some(MetricSummary {
            accuracy: aggregate_folds(&col(|m| m.accuracy))?,
            roc_auc: aucs.and_then(|a| aggregate_folds(&a)),
            macro_f1: aggregate_folds(&col(|m| m.macro_f1))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub seed: u64,
    pub stratify_on: StratifyOn,
    pub folds: Vec<FoldResult>,
    pub aggregate: Option<MetricSummary>,
    pub audit: LeakageReport,
    /// True only when the audit is clean and every fold completed.
    pub valid: bool,
}

impl EvaluationReport {
    pub fn new(plan: &FoldPlan, folds: Vec<FoldResult>, audit: LeakageReport) -> Self {
        let aggregate = MetricSummary::from_folds(&folds);
        let valid = audit.clean && folds.len() == plan.folds.len();
        EvaluationReport { k: plan.k, seed: plan.seed, stratify_on: plan.stratify_on, folds, aggregate, audit, valid }
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub report: EvaluationReport,
    /// Selected parameters per fold, in fold order.
    pub models: Vec<NetworkParameters<f32>>,
}

/// Train on `train` (checkpointing on `val`) and evaluate once on `test`.
pub fn evaluate_fold(
    fold: usize,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
) -> Result<(FoldResult, NetworkParameters<f32>), TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let trained = train_fold(train, val, model_cfg, train_cfg)?;
    let probs = predict(&trained.params, test, train_cfg.batch_size.max(8))?;
    let classes = model_cfg.n_classes;
    let truth: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&truth, &probs, classes)?;
    let predictions = test
        .samples
        .iter()
        .zip(probs.chunks_exact(classes))
        .map(|(s, p)| Prediction { id: s.id.clone(), fold, truth: s.label, probs: p.to_vec() })
        .collect();
    let c = trained.curves;
    let result = FoldResult {
        fold,
        best_epoch: c.best_epoch,
        stopped_early: c.stopped_early,
        train_loss: c.train_loss,
        val_loss: c.val_loss,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        metrics,
        predictions,
    };
    Ok((result, trained.params))
}

/// Per-fold training seed: folds get distinct, reproducible streams.
fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64)
}

/// Audit `plan`, then train and evaluate one fresh model per fold. `data`
/// holds one sample per subject, keyed by subject id. A dirty audit aborts
/// before any training. Folds run on up to `jobs` threads; each fold's
/// computation is independent of scheduling, so results are identical for
/// any `jobs`.
pub fn cross_validate_with_plan(
    plan: &FoldPlan,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
    jobs: usize,
) -> Result<CvOutcome, TrainError> {
    let audit = audit_leakage(plan);
    if !audit.clean {
        return Err(TrainError::Leakage(audit));
    }
    let index: HashMap<&str, usize> = data.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let lookup = |ids: &[String]| -> Result<Dataset, TrainError> {
        let idx = ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| TrainError::MissingSubject(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(data.subset(&idx))
    };
    let run = |(i, fold): (usize, &Fold)| -> Result<(FoldResult, NetworkParameters<f32>), TrainError> {
        let (train, val, test) = (lookup(&fold.train)?, lookup(&fold.val)?, lookup(&fold.test)?);
        let cfg = TrainingConfig { seed: fold_seed(train_cfg.seed, i), ..train_cfg.clone() };
        log::info!("fold {i}: {} train / {} val / {} test", train.len(), val.len(), test.len());
        evaluate_fold(i, &train, &val, &test, model_cfg, &cfg)
    };
    let results: Vec<Result<_, TrainError>> = if jobs <= 1 {
        plan.folds.iter().enumerate().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TrainError::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| plan.folds.par_iter().enumerate().map(run).collect())
    };
    let mut folds = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for r in results {
        let (f, m) = r?;
        folds.push(f);
        models.push(m);
    }
    let report = EvaluationReport::new(plan, folds, audit);
    Ok(CvOutcome { plan: plan.clone(), report, models })
}

pub fn cross_validate(
    records: &[SubjectRecord],
    data: &Dataset,
    cv: &CvConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
    jobs: usize,
) -> Result<CvOutcome, TrainError> {
    let plan = stratified_subject_kfold(records, cv.k, cv.seed, cv.val_fraction, cv.stratify_on)?;
    cross_validate_with_plan(&plan, data, model_cfg, train_cfg, jobs)
}

/// `subject_id,fold,truth,p_demented`, one row per test prediction in fold
/// order.
pub fn predictions_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("subject_id,fold,truth,p_demented\n");
    for f in &report.folds {
        for p in &f.predictions {
            let _ = writeln!(s, "{},{},{},{}", p.id, p.fold, p.truth, p.p_demented());
        }
    }
    s
}

/// `epoch,train_loss,val_loss` for one fold.
pub fn write_curves_csv(fold: &FoldResult) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in fold.train_loss.iter().zip(&fold.val_loss).enumerate() {
        let _ = writeln!(s, "{},{t},{v}", e + 1);
    }
    s
}
