//! Output directory helpers and the hashed manifest of produced files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let data = fs::read(path).map_err(|e| CliError::Runtime(format!("cannot hash {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&data)))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write_text(path, &text)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hash every file under `run_dir` (except the manifest itself) and write
/// the sorted list to `artifacts.json`.
pub fn write_manifest(run_dir: &Path) -> Result<Vec<Artifact>, CliError> {
    let mut files = Vec::new();
    walk(run_dir, &mut files)?;
    let mut list = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.strip_prefix(run_dir).expect("walked below run_dir");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let bytes = fs::metadata(&f)?.len();
        list.push(Artifact { path: rel, bytes, sha256: sha256_file(&f)? });
    }
    list.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(&run_dir.join(MANIFEST_NAME), &list)?;
    Ok(list)
}
