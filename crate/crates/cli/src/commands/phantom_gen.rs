use std::path::{Path, PathBuf};

use voxfuse::phantom::{generate_phantom_cohort, write_cohort, CohortOptions, PhantomError};
use voxfuse::{cohort_summary, CohortRow};

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct PhantomGenArgs {
    pub n: usize,
    pub demented_frac: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub options: CohortOptions,
}

/// Generate and write a cohort; returns the manifest path and the per-class
/// summary.
pub fn phantom_gen(args: &PhantomGenArgs) -> Result<(PathBuf, Vec<CohortRow>), CliError> {
    let cohort = generate_phantom_cohort(args.n, args.demented_frac, args.seed, &args.options).map_err(|e| match e {
        PhantomError::Io(_) | PhantomError::Nifti(_) | PhantomError::Manifest(_) => CliError::runtime(e),
        _ => CliError::config(e),
    })?;
    let manifest = write_cohort(&args.out, &cohort)
        .map_err(|e| CliError::Runtime(format!("cannot write cohort to {}: {e}", args.out.display())))?;
    let records: Vec<_> = cohort.subjects.iter().map(|s| s.record.clone()).collect();
    Ok((manifest, cohort_summary(&records)))
}

pub fn format_summary(manifest: &Path, rows: &[CohortRow]) -> String {
    let total: usize = rows.iter().map(|r| r.count).sum();
    let mut s = format!("wrote {total} subjects; manifest {}\n", manifest.display());
    s.push_str("CDR  label                n  mean_age  M/F\n");
    for r in rows {
        s.push_str(&format!(
            "{:<4} {:<18} {:>3}  {:>8.1}  {}/{}\n",
            r.cdr.to_string(),
            r.label.name(),
            r.count,
            r.mean_age.unwrap_or(f64::NAN),
            r.male,
            r.female
        ));
    }
    s
}
