use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use voxfuse::ingest::{load_subject, read_manifest};
use voxfuse::model::{checkpoint, NetworkParameters};
use voxfuse::splits::{audit_leakage, stratified_subject_kfold, SliceMode};
use voxfuse::train::slices::{class_of, run_slice_protocol, SliceReport};
use voxfuse::train::{cross_validate_with_plan, predictions_csv, write_curves_csv, Dataset, EvaluationReport, Sample};
use voxfuse::{ModalityStack, SubjectRecord};

use crate::artifacts::{write_json, write_manifest, write_text};
use crate::config::{Overrides, ResolvedRun, RunConfig, RunMode};
use crate::error::CliError;
use crate::plots::{bars_svg, curves_png, curves_svg, Curve};

/// What a finished run reports back to the caller.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub mode: RunMode,
    /// Clean audit and every fold completed.
    pub valid: bool,
    /// Mean (cv3d) or holdout test accuracy in percent.
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
}

pub fn run_from_file(config: &Path, flags: &Overrides) -> Result<RunSummary, CliError> {
    let cfg = RunConfig::load(config)?;
    run_experiment(&cfg, flags)
}

fn load_cohort(run: &ResolvedRun) -> Result<Vec<(SubjectRecord, ModalityStack)>, CliError> {
    let manifest = read_manifest(&run.manifest)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", run.manifest.display())))?;
    for w in &manifest.warnings {
        log::warn!("manifest: {w}");
    }
    if manifest.records.is_empty() {
        return Err(CliError::Config(format!("manifest {} lists no subjects", run.manifest.display())));
    }
    let mut cohort = Vec::with_capacity(manifest.records.len());
    for record in manifest.records {
        let loaded = load_subject(&record, &run.data_root).map_err(CliError::runtime)?;
        for w in &loaded.warnings {
            log::warn!("{}: {w}", record.subject_id);
        }
        cohort.push((record, loaded.stack));
    }
    Ok(cohort)
}

fn save_model(path: &Path, params: &NetworkParameters<f32>, meta: serde_json::Value) -> Result<(), CliError> {
    checkpoint::save(path, params, meta).map(|_| ()).map_err(CliError::runtime)
}

#[derive(Serialize)]
struct RunInfo {
    wall_seconds: f64,
}

/// Execute one experiment end to end and write its artifacts under
/// `<output_dir>/<experiment>/`. Returns `Err(Audit)` if a subject-level
/// protocol fails its audit; the slice-level diagnostic completes and
/// reports `valid = false`.
pub fn run_experiment(cfg: &RunConfig, flags: &Overrides) -> Result<RunSummary, CliError> {
    let run = cfg.resolve(flags)?;
    let dir = run.run_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    write_json(&dir.join("config.resolved.json"), &run)?;
    let started = Instant::now();
    let cohort = load_cohort(&run)?;
    log::info!("{}: {} subjects from {}", run.experiment, cohort.len(), run.manifest.display());

    let summary = match run.mode {
        RunMode::Cv3d => run_cv3d(&run, &cohort, &dir)?,
        RunMode::HoldoutSliceSubjectlevel => run_slices(&run, &cohort, &dir, SliceMode::SubjectLevel)?,
        RunMode::SliceLevelDiagnostic => run_slices(&run, &cohort, &dir, SliceMode::SliceLevel)?,
    };
    if !run.deterministic {
        write_json(&dir.join("run_info.json"), &RunInfo { wall_seconds: started.elapsed().as_secs_f64() })?;
    }
    write_manifest(&dir)?;
    Ok(summary)
}

fn run_cv3d(run: &ResolvedRun, cohort: &[(SubjectRecord, ModalityStack)], dir: &Path) -> Result<RunSummary, CliError> {
    let records: Vec<SubjectRecord> = cohort.iter().map(|(r, _)| r.clone()).collect();
    let cv = run.cv_config();
    let plan = stratified_subject_kfold(&records, cv.k, cv.seed, cv.val_fraction, cv.stratify_on).map_err(CliError::runtime)?;
    write_json(&dir.join("fold_plan.json"), &plan)?;
    let audit = audit_leakage(&plan);
    write_json(&dir.join("audit.json"), &audit)?;
    if !audit.clean {
        return Err(CliError::Audit(format!("leakage audit failed with {} violation(s); see audit.json", audit.violations.len())));
    }

    let classes = run.model.n_classes;
    let dims = cohort[0].1.dims();
    let samples =
        cohort.iter().map(|(r, s)| Sample::from_stack(s, &run.model.modalities, class_of(r, classes))).collect();
    let data = Dataset::new(run.model.modalities.len(), dims, samples)?;
    let outcome = cross_validate_with_plan(&plan, &data, &run.model, &run.training, run.jobs)?;
    let report = &outcome.report;
    write_cv_outputs(report, dir)?;
    if run.save_checkpoints {
        for (f, params) in report.folds.iter().zip(&outcome.models) {
            let meta = serde_json::json!({
                "experiment": run.experiment,
                "fold": f.fold,
                "best_epoch": f.best_epoch,
                "test_subjects": plan.folds[f.fold].test,
            });
            save_model(&dir.join(format!("checkpoints/fold{}", f.fold)), params, meta)?;
        }
    }
    let agg = report.aggregate.as_ref();
    Ok(RunSummary {
        run_dir: dir.to_path_buf(),
        mode: run.mode,
        valid: report.valid,
        accuracy: agg.map_or(f64::NAN, |a| a.accuracy.mean),
        roc_auc: agg.and_then(|a| a.roc_auc.map(|s| s.mean)),
    })
}

fn write_cv_outputs(report: &EvaluationReport, dir: &Path) -> Result<(), CliError> {
    write_json(&dir.join("report.json"), report)?;
    write_text(&dir.join("predictions.csv"), &predictions_csv(report))?;
    for f in &report.folds {
        write_text(&dir.join(format!("curves/fold{}.csv", f.fold)), &write_curves_csv(f))?;
    }
    let curves: Vec<Curve> =
        report.folds.iter().map(|f| Curve { label: format!("fold {}", f.fold), train: &f.train_loss, val: &f.val_loss }).collect();
    write_text(&dir.join("curves/loss.svg"), &curves_svg("Loss per fold (solid train, dashed validation)", &curves))?;
    curves_png(&curves).save(dir.join("curves/loss.png")).map_err(CliError::runtime)?;
    let acc: Vec<(String, f64)> = report.folds.iter().map(|f| (format!("fold {}", f.fold), f.metrics.accuracy)).collect();
    write_text(&dir.join("plots/fold_accuracy.svg"), &bars_svg("Test accuracy per fold", "accuracy (%)", &acc, 100.0))?;
    let auc: Vec<(String, f64)> =
        report.folds.iter().filter_map(|f| f.metrics.roc_auc.map(|a| (format!("fold {}", f.fold), a))).collect();
    if !auc.is_empty() {
        write_text(&dir.join("plots/fold_auc.svg"), &bars_svg("Test ROC-AUC per fold", "ROC-AUC", &auc, 1.0))?;
    }
    Ok(())
}

fn slice_predictions_csv(report: &SliceReport) -> String {
    let classes = report.predictions.first().map_or(0, |p| p.probs.len());
    let mut s = String::from("slice_id,truth");
    for c in 0..classes {
        s.push_str(&format!(",p{c}"));
    }
    s.push('\n');
    for p in &report.predictions {
        s.push_str(&format!("{},{}", p.id, p.truth));
        for v in &p.probs {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn run_slices(
    run: &ResolvedRun,
    cohort: &[(SubjectRecord, ModalityStack)],
    dir: &Path,
    mode: SliceMode,
) -> Result<RunSummary, CliError> {
    let outcome = run_slice_protocol(cohort, mode, &run.slices, run.seeds.split, run.cv.stratify_on, &run.model, &run.training)?;
    let report = &outcome.report;
    write_json(&dir.join("slice_assignment.json"), &outcome.assignment)?;
    write_json(&dir.join("audit.json"), &report.audit)?;
    write_json(&dir.join("report.json"), report)?;
    write_text(&dir.join("predictions.csv"), &slice_predictions_csv(report))?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        csv.push_str(&format!("{},{t},{v}\n", e + 1));
    }
    write_text(&dir.join("curves/holdout.csv"), &csv)?;
    let curves = [Curve { label: mode_label(mode).into(), train: &report.train_loss, val: &report.val_loss }];
    write_text(&dir.join("curves/loss.svg"), &curves_svg("Loss (solid train, dashed validation)", &curves))?;
    curves_png(&curves).save(dir.join("curves/loss.png")).map_err(CliError::runtime)?;
    if run.save_checkpoints {
        let meta = serde_json::json!({"experiment": run.experiment, "mode": run.mode.name(), "best_epoch": report.best_epoch});
        save_model(&dir.join("checkpoints/model"), &outcome.model, meta)?;
    }
    if !report.valid {
        log::warn!(
            "{}: audit found {} subject(s) spanning partitions; the report is marked invalid",
            run.experiment,
            report.audit.violations.len()
        );
    }
    Ok(RunSummary {
        run_dir: dir.to_path_buf(),
        mode: run.mode,
        valid: report.valid,
        accuracy: report.metrics.accuracy,
        roc_auc: report.metrics.roc_auc,
    })
}

fn mode_label(mode: SliceMode) -> &'static str {
    match mode {
        SliceMode::SliceLevel => "slice-level split",
        SliceMode::SubjectLevel => "subject-level split",
    }
}
