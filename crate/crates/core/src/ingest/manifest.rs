//! Cohort manifest CSV:
//! `subject_id,cdr,age,mmse,sex,t1_path,gm_path,wm_path,csf_path`.
//! Optional cells (mmse, sex, tissue paths) may be empty.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::types::{Cdr, Modality, Sex, SubjectRecord};

pub const MANIFEST_HEADER: [&str; 9] = [
    "subject_id", "cdr", "age", "mmse", "sex", "t1_path", "gm_path", "wm_path", "csf_path",
];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest has no header row")]
    MissingHeader,
    #[error("manifest header {found:?} does not match expected {expected:?}")]
    BadHeader { found: Vec<String>, expected: Vec<String> },
    #[error("row {row}, field `{field}`: {message}")]
    Row { row: usize, field: &'static str, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Parsed manifest plus any non-fatal diagnostics (also logged as warnings).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLoad {
    pub records: Vec<SubjectRecord>,
    pub warnings: Vec<String>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<ManifestLoad, ManifestError> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Parse manifest text. Rows are numbered from 1 for the header, so the
/// first subject is row 2. Duplicate subject ids keep the first row.
pub fn parse_manifest(text: &str) -> Result<ManifestLoad, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => return Err(ManifestError::MissingHeader),
    };
    let found: Vec<String> = header.iter().map(|s| s.trim().trim_start_matches('\u{feff}').to_string()).collect();
    if found != MANIFEST_HEADER {
        return Err(ManifestError::BadHeader {
            found,
            expected: MANIFEST_HEADER.iter().map(|s| s.to_string()).collect(),
        });
    }

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 2;
        let row = row?;
        if row.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(ManifestError::Row {
                row: row_no,
                field: "row",
                message: format!("expected {} cells, found {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let cell = |k: usize| row.get(k).unwrap_or("").trim();
        let err = |field: &'static str, message: String| ManifestError::Row { row: row_no, field, message };

        let subject_id = cell(0).to_string();
        if subject_id.is_empty() {
            return Err(err("subject_id", "empty subject id".into()));
        }
        let cdr_value: f64 = cell(1).parse().map_err(|_| err("cdr", format!("cannot parse `{}`", cell(1))))?;
        let cdr = Cdr::from_value(cdr_value).map_err(|e| err("cdr", e.to_string()))?;
        let age: f64 = cell(2).parse().map_err(|_| err("age", format!("cannot parse `{}`", cell(2))))?;
        if !(age > 0.0) {
            return Err(err("age", format!("age must be positive, got {age}")));
        }
        let mut record = SubjectRecord::new(subject_id.clone(), cdr, age).map_err(|e| err("subject_id", e.to_string()))?;
        if !cell(3).is_empty() {
            let mmse: f64 = cell(3).parse().map_err(|_| err("mmse", format!("cannot parse `{}`", cell(3))))?;
            record = record.with_mmse(mmse).map_err(|e| err("mmse", e.to_string()))?;
        }
        record.sex = cell(4).parse::<Sex>().map_err(|e| err("sex", e.to_string()))?;
        for (k, modality) in Modality::ALL.into_iter().enumerate() {
            let p = cell(5 + k);
            if !p.is_empty() {
                record.modality_paths.insert(modality, p.to_string());
            }
        }
        if !record.modality_paths.contains_key(&Modality::T1) {
            return Err(err("t1_path", "T1 path is mandatory".into()));
        }

        if !seen.insert(subject_id.clone()) {
            let msg = format!("row {row_no}: duplicate subject_id `{subject_id}` ignored (first row kept)");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        records.push(record);
    }
    Ok(ManifestLoad { records, warnings })
}

fn format_number(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn manifest_to_string(records: &[SubjectRecord]) -> Result<String, ManifestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let path = |m: Modality| r.modality_paths.get(&m).cloned().unwrap_or_default();
        w.write_record([
            r.subject_id.clone(),
            format!("{:.1}", r.cdr.value()),
            format_number(r.age),
            r.mmse.map(format_number).unwrap_or_default(),
            r.sex.code().to_string(),
            path(Modality::T1),
            path(Modality::GM),
            path(Modality::WM),
            path(Modality::CSF),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ManifestError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SubjectRecord]) -> Result<(), ManifestError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, manifest_to_string(records)?)?;
    Ok(())
}

/// Resolve a manifest path cell: absolute paths are kept, relative ones are
/// joined to `root` (the data root, by default the manifest's directory).
pub fn resolve_path(root: &Path, cell: &str) -> PathBuf {
    let p = Path::new(cell);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,cdr,age,mmse,sex,t1_path,gm_path,wm_path,csf_path\n";

    #[test]
    fn header_only_is_empty() {
        let load = parse_manifest(HEADER).unwrap();
        assert!(load.records.is_empty());
        assert!(load.warnings.is_empty());
    }

    #[test]
    fn empty_file_is_missing_header() {
        assert!(matches!(parse_manifest(""), Err(ManifestError::MissingHeader)));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "id,cdr\nA,0\n";
        assert!(matches!(parse_manifest(text), Err(ManifestError::BadHeader { .. })));
    }

    #[test]
    fn parses_optional_cells() {
        let text = format!("{HEADER}OAS1_0001,0.5,74,,F,a_T1.nii.gz,,,\nOAS1_0002,0,68.5,29,M,b.nii,b_gm.nii,b_wm.nii,b_csf.nii\n");
        let load = parse_manifest(&text).unwrap();
        assert_eq!(load.records.len(), 2);
        let a = &load.records[0];
        assert_eq!(a.cdr, Cdr::VeryMild);
        assert_eq!(a.mmse, None);
        assert_eq!(a.sex, Sex::Female);
        assert_eq!(a.modality_paths.len(), 1);
        assert_eq!(load.records[1].modality_paths.len(), 4);
        assert_eq!(load.records[1].mmse, Some(29.0));
    }

    #[test]
    fn duplicates_collapse_to_first_with_warning() {
        let text = format!("{HEADER}S1,0,70,,,x.nii,,,\nS1,1,80,,,y.nii,,,\n");
        let load = parse_manifest(&text).unwrap();
        assert_eq!(load.records.len(), 1);
        assert_eq!(load.records[0].cdr, Cdr::None);
        assert_eq!(load.warnings.len(), 1);
        assert!(load.warnings[0].contains("S1"));
    }

    #[test]
    fn row_errors_are_addressed() {
        let text = format!("{HEADER}S1,0,70,,,x.nii,,,\nS2,zero,70,,,x.nii,,,\n");
        match parse_manifest(&text) {
            Err(ManifestError::Row { row: 3, field: "cdr", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{HEADER}S1,3,70,,,x.nii,,,\n");
        assert!(matches!(parse_manifest(&text), Err(ManifestError::Row { row: 2, field: "cdr", .. })));
        let text = format!("{HEADER}S1,0,old,,,x.nii,,,\n");
        assert!(matches!(parse_manifest(&text), Err(ManifestError::Row { field: "age", .. })));
        let text = format!("{HEADER}S1,0,70,,,,,,\n");
        assert!(matches!(parse_manifest(&text), Err(ManifestError::Row { field: "t1_path", .. })));
    }

    #[test]
    fn write_then_read_roundtrip() {
        let records = vec![
            SubjectRecord::new("a", Cdr::Mild, 77.25)
                .unwrap()
                .with_mmse(21.0)
                .unwrap()
                .with_sex(Sex::Male)
                .with_path(Modality::T1, "v/a_T1.nii.gz")
                .with_path(Modality::CSF, "v/a_CSF.nii.gz"),
            SubjectRecord::new("b", Cdr::None, 70.0).unwrap().with_path(Modality::T1, "v/b.nii"),
        ];
        let text = manifest_to_string(&records).unwrap();
        assert!(text.starts_with(HEADER));
        assert_eq!(parse_manifest(&text).unwrap().records, records);
    }
}
