//! Checkpoint container: a safetensors file holding every named tensor
//! (little-endian f32) next to a JSON sidecar carrying the format version,
//! the [`ModelConfig`] and free-form training metadata.
//!
//! For a stem `fold0` the files are `fold0.safetensors` and `fold0.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, NetworkParameters};

pub const FORMAT_NAME: &str = "voxfuse-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub version: u32,
    pub tensors_file: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("safetensors") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut tensors = stem.clone().into_os_string();
    tensors.push(".safetensors");
    let mut sidecar = stem.into_os_string();
    sidecar.push(".json");
    (PathBuf::from(tensors), PathBuf::from(sidecar))
}

/// Write `<stem>.safetensors` and `<stem>.json`; returns both paths.
pub fn save(stem: &Path, params: &NetworkParameters<f32>, metadata: serde_json::Value) -> Result<(PathBuf, PathBuf), ModelError> {
    params.check_finite()?;
    let (tensor_path, sidecar_path) = stem_paths(stem);
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|t| {
            let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (t.name.clone(), raw, t.shape.clone())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| ModelError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // One entry only: the header map is serialized in hash order, and a
    // single key keeps the file bytes reproducible.
    let info: HashMap<String, String> = [("format".to_string(), format!("{FORMAT_NAME}/{FORMAT_VERSION}"))].into();
    let blob = safetensors::serialize(views, &Some(info)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if let Some(dir) = tensor_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&tensor_path, blob)?;
    let sidecar = CheckpointSidecar {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        tensors_file: tensor_path.file_name().unwrap().to_string_lossy().into_owned(),
        model: params.config().clone(),
        metadata,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(&sidecar_path, json)?;
    Ok((tensor_path, sidecar_path))
}

/// Load a checkpoint given its stem or either of its two files.
pub fn load(path: &Path) -> Result<(NetworkParameters<f32>, CheckpointSidecar), ModelError> {
    let (_, sidecar_path) = stem_paths(path);
    let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(&sidecar_path)?)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", sidecar_path.display())))?;
    if sidecar.format != FORMAT_NAME {
        return Err(ModelError::Checkpoint(format!("unknown format `{}`", sidecar.format)));
    }
    if sidecar.version > FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint version {} is newer than supported {FORMAT_VERSION}",
            sidecar.version
        )));
    }
    let tensor_path = sidecar_path.with_file_name(&sidecar.tensors_file);
    let blob = fs::read(&tensor_path)?;
    let st = SafeTensors::deserialize(&blob).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut named = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ModelError::Checkpoint(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, view.shape().to_vec(), data));
    }
    let params = NetworkParameters::from_named(&sidecar.model, named)?;
    Ok((params, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::slice_2d();
        let params = NetworkParameters::<f32>::build(&cfg, 9).unwrap();
        let meta = serde_json::json!({"fold": 2, "best_epoch": 5});
        let stem = dir.path().join("ckpt/fold2");
        let (t, s) = save(&stem, &params, meta.clone()).unwrap();
        assert!(t.ends_with("fold2.safetensors") && s.ends_with("fold2.json"));
        for p in [stem.clone(), t, s] {
            let (back, sidecar) = load(&p).unwrap();
            assert_eq!(back, params);
            assert_eq!(sidecar.metadata, meta);
            assert_eq!(sidecar.version, FORMAT_VERSION);
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = NetworkParameters::<f32>::build(&ModelConfig::slice_2d(), 1).unwrap();
        let stem = dir.path().join("m");
        save(&stem, &params, serde_json::Value::Null).unwrap();
        let sidecar_path = dir.path().join("m.json");
        let mut sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(&sidecar_path).unwrap()).unwrap();
        sidecar.model = ModelConfig::default();
        fs::write(&sidecar_path, serde_json::to_vec(&sidecar).unwrap()).unwrap();
        assert!(matches!(load(&stem), Err(ModelError::Checkpoint(_))));
    }
}
