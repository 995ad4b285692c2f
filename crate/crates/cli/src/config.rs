//! Run configuration: one JSON file per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use voxfuse::model::{ModelConfig, SpatialRank};
use voxfuse::splits::StratifyOn;
use voxfuse::train::slices::SliceConfig;
use voxfuse::train::{CvConfig, TrainingConfig};

use crate::error::CliError;

/// Environment variable that overrides `data_root`.
pub const DATA_ROOT_ENV: &str = "VOXFUSE_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Subject-level stratified k-fold on full 3D stacks.
    Cv3d,
    /// 2D slices, subject-level train/val/test holdout.
    HoldoutSliceSubjectlevel,
    /// 2D slices shuffled without regard to subject. Leaks on purpose.
    SliceLevelDiagnostic,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Cv3d => "cv3d",
            RunMode::HoldoutSliceSubjectlevel => "holdout_slice_subjectlevel",
            RunMode::SliceLevelDiagnostic => "slice_level_diagnostic",
        }
    }

    fn default_model(self) -> ModelConfig {
        match self {
            RunMode::Cv3d => ModelConfig::default(),
            _ => ModelConfig::slice_2d(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Fold and holdout assignment.
    pub split: u64,
    /// Initialization, shuffling and dropout; fold `i` uses `training + i`.
    pub training: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
    pub val_fraction: f64,
    pub stratify_on: StratifyOn,
}

impl Default for CvSection {
    fn default() -> Self {
        let d = CvConfig::default();
        CvSection { k: d.k, val_fraction: d.val_fraction, stratify_on: d.stratify_on }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub mode: RunMode,
    pub manifest: PathBuf,
    /// Root for relative volume paths; defaults to the manifest's directory.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub slices: SliceConfig,
    /// Field-wise overrides of the mode's default model.
    #[serde(default = "empty_object")]
    pub model: Value,
    /// Field-wise overrides of the default training settings.
    #[serde(default = "empty_object")]
    pub training: Value,
    /// Keep wall-clock data out of every artifact so reruns are
    /// byte-identical.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// A validated config with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub experiment: String,
    pub mode: RunMode,
    pub manifest: PathBuf,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub cv: CvSection,
    pub slices: SliceConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub deterministic: bool,
    pub jobs: usize,
    pub save_checkpoints: bool,
}

impl ResolvedRun {
    /// `<output_dir>/<experiment>`
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.experiment)
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig { k: self.cv.k, seed: self.seeds.split, val_fraction: self.cv.val_fraction, stratify_on: self.cv.stratify_on }
    }
}

fn parse_with_path<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { prefix.to_string() } else { format!("{prefix}.{path}") };
        CliError::Config(format!("config field `{field}`: {}", e.inner()))
    })
}

/// Overlay `overrides` onto `base`, key by key. Unknown keys survive so the
/// typed parse afterwards can name them.
fn merge(base: Value, overrides: &Value, section: &str) -> Result<Value, CliError> {
    let Value::Object(mut map) = base else { unreachable!("configs serialize to objects") };
    let Value::Object(over) = overrides else {
        return Err(CliError::Config(format!("config field `{section}` must be an object")));
    };
    for (k, v) in over {
        map.insert(k.clone(), v.clone());
    }
    Ok(Value::Object(map))
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::Config(format!("config: {}", e.inner()))
            } else {
                CliError::Config(format!("config field `{path}`: {}", e.inner()))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Apply overrides (flags, then the data-root environment variable,
    /// then the file) and validate everything a run needs up front.
    pub fn resolve(&self, flags: &Overrides) -> Result<ResolvedRun, CliError> {
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) || self.experiment == ".." {
            return Err(CliError::Config(format!("config field `experiment`: `{}` is not a valid directory name", self.experiment)));
        }
        let mode_model = self.mode.default_model();
        let model: ModelConfig =
            parse_with_path(merge(serde_json::to_value(&mode_model).expect("serializable"), &self.model, "model")?, "model")?;
        model.validate().map_err(|e| CliError::Config(format!("config field `model`: {e}")))?;
        let wants = match self.mode {
            RunMode::Cv3d => SpatialRank::ThreeD,
            _ => SpatialRank::TwoD,
        };
        if model.spatial_rank != wants {
            return Err(CliError::Config(format!(
                "config field `model.spatial_rank`: mode {} needs {}",
                self.mode.name(),
                if wants == SpatialRank::ThreeD { "3d" } else { "2d" }
            )));
        }
        if self.mode != RunMode::Cv3d && model.modalities.len() != 1 {
            return Err(CliError::Config("config field `model.modalities`: slice modes take exactly one modality".into()));
        }
        if self.training.get("seed").is_some() {
            return Err(CliError::Config("config field `training.seed`: set `seeds.training` instead".into()));
        }
        let mut training: TrainingConfig = parse_with_path(
            merge(serde_json::to_value(TrainingConfig::default()).expect("serializable"), &self.training, "training")?,
            "training",
        )?;
        training.seed = self.seeds.training;
        training.validate().map_err(|e| CliError::Config(format!("config field `training`: {e}")))?;
        match self.mode {
            RunMode::Cv3d => {
                if self.cv.k < 2 {
                    return Err(CliError::Config(format!("config field `cv.k`: need at least 2 folds, got {}", self.cv.k)));
                }
                if !(self.cv.val_fraction > 0.0 && self.cv.val_fraction < 1.0) {
                    return Err(CliError::Config(format!("config field `cv.val_fraction`: must lie in (0, 1), got {}", self.cv.val_fraction)));
                }
            }
            _ => {
                let f = self.slices.fractions;
                if f.iter().any(|&x| !(x > 0.0)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
                    return Err(CliError::Config(format!("config field `slices.fractions`: need three positive shares summing to 1, got {f:?}")));
                }
                if self.slices.axis > 2 {
                    return Err(CliError::Config(format!("config field `slices.axis`: must be 0, 1 or 2, got {}", self.slices.axis)));
                }
                if model.modalities[0] != self.slices.modality {
                    return Err(CliError::Config(format!(
                        "config field `slices.modality`: {} differs from the model's input {}",
                        self.slices.modality, model.modalities[0]
                    )));
                }
            }
        }
        let jobs = flags.jobs.unwrap_or(self.jobs);
        if jobs == 0 {
            return Err(CliError::Config("config field `jobs`: must be at least 1".into()));
        }
        let env_root = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        let data_root = flags
            .data_root
            .clone()
            .or(env_root)
            .or_else(|| self.data_root.clone())
            .unwrap_or_else(|| self.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
        Ok(ResolvedRun {
            experiment: self.experiment.clone(),
            mode: self.mode,
            manifest: self.manifest.clone(),
            data_root,
            output_dir: flags.output_dir.clone().unwrap_or_else(|| self.output_dir.clone()),
            seeds: self.seeds.clone(),
            cv: self.cv.clone(),
            slices: self.slices.clone(),
            model,
            training,
            deterministic: self.deterministic,
            jobs,
            save_checkpoints: self.save_checkpoints,
        })
    }
}

/// JSON Schema (draft 2020-12) of the run config file.
pub fn run_config_schema() -> Value {
    let stratify = json!({"enum": ["binary", "fine_grained"]});
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "voxfuse run config",
        "type": "object",
        "additionalProperties": false,
        "required": ["experiment", "mode", "manifest", "output_dir"],
        "properties": {
            "experiment": {"type": "string", "description": "Name of the run directory under output_dir."},
            "mode": {"enum": ["cv3d", "holdout_slice_subjectlevel", "slice_level_diagnostic"]},
            "manifest": {"type": "string", "description": "Cohort manifest CSV."},
            "data_root": {"type": ["string", "null"], "description": format!("Root for relative volume paths. Overridden by ${DATA_ROOT_ENV} and --data-root; defaults to the manifest directory.")},
            "output_dir": {"type": "string"},
            "seeds": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "split": {"type": "integer", "minimum": 0},
                    "training": {"type": "integer", "minimum": 0}
                }
            },
            "cv": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "k": {"type": "integer", "minimum": 2},
                    "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "stratify_on": stratify
                }
            },
            "slices": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "axis": {"type": "integer", "minimum": 0, "maximum": 2},
                    "modality": {"enum": ["T1", "GM", "WM", "CSF"]},
                    "min_brain_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}
                }
            },
            "model": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "modalities": {"type": "array", "items": {"enum": ["T1", "GM", "WM", "CSF"]}},
                    "encoder_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "embedding_dim": {"type": "integer", "minimum": 1},
                    "fused_dim": {"type": "integer", "minimum": 1},
                    "head_hidden": {"type": "integer", "minimum": 1},
                    "dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "n_classes": {"type": "integer", "minimum": 2},
                    "spatial_rank": {"enum": ["3d", "2d"]},
                    "conv_kernel": {"type": "integer", "minimum": 1},
                    "pool_kernel": {"type": "integer", "minimum": 1},
                    "bn_eps": {"type": "number", "exclusiveMinimum": 0},
                    "bn_momentum": {"type": "number", "minimum": 0, "maximum": 1}
                }
            },
            "training": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                    "batch_size": {"type": "integer", "minimum": 1},
                    "max_epochs": {"type": "integer", "minimum": 1},
                    "early_stop_patience": {"type": "integer", "minimum": 1},
                    "class_weighting": {"enum": ["none", "inverse_frequency"]}
                }
            },
            "deterministic": {"type": "boolean"},
            "jobs": {"type": "integer", "minimum": 1},
            "save_checkpoints": {"type": "boolean"}
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"experiment": "e", "mode": "cv3d", "manifest": "d/manifest.csv", "output_dir": "out"}"#;

    #[test]
    fn minimal_config_resolves_to_defaults() {
        let r = RunConfig::from_json_str(MINIMAL).unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(r.model, ModelConfig::default());
        assert_eq!(r.training, TrainingConfig::default());
        assert_eq!(r.data_root, PathBuf::from("d"));
        assert_eq!(r.run_dir(), PathBuf::from("out/e"));
        assert!(r.deterministic);
    }

    #[test]
    fn misspelled_mode_names_the_field() {
        let err = RunConfig::from_json_str(&MINIMAL.replace("cv3d", "cv3D")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`mode`"), "{err}");
    }

    #[test]
    fn unknown_override_field_is_named() {
        let text = MINIMAL.replace(r#""output_dir": "out""#, r#""output_dir": "out", "training": {"learning_rat": 0.1}"#);
        let err = RunConfig::from_json_str(&text).unwrap().resolve(&Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("training"), "{err}");
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn slice_modes_default_to_2d_model() {
        let text = MINIMAL.replace("cv3d", "slice_level_diagnostic");
        let r = RunConfig::from_json_str(&text).unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(r.model, ModelConfig::slice_2d());
        let text = MINIMAL.replace(r#""output_dir": "out""#, r#""output_dir": "out", "model": {"spatial_rank": "2d", "modalities": ["T1"], "fused_dim": 64}"#);
        let err = RunConfig::from_json_str(&text).unwrap().resolve(&Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("spatial_rank"), "{err}");
    }

    #[test]
    fn flags_win_over_file() {
        let flags = Overrides { data_root: Some("/x".into()), output_dir: Some("/o".into()), jobs: Some(3) };
        let r = RunConfig::from_json_str(MINIMAL).unwrap().resolve(&flags).unwrap();
        assert_eq!((r.data_root, r.output_dir, r.jobs), (PathBuf::from("/x"), PathBuf::from("/o"), 3));
    }

    #[test]
    fn schema_lists_every_field() {
        let schema = run_config_schema();
        let props = schema["properties"].as_object().unwrap();
        let cfg = RunConfig::from_json_str(MINIMAL).unwrap();
        let Value::Object(fields) = serde_json::to_value(&cfg).unwrap() else { panic!() };
        let mut a: Vec<_> = props.keys().cloned().collect();
        let mut b: Vec<_> = fields.keys().cloned().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let section = |name: &str, v: Value| {
            let mut want: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            let mut got: Vec<String> = props[name]["properties"].as_object().unwrap().keys().cloned().collect();
            want.sort();
            got.sort();
            assert_eq!(got, want, "section {name}");
        };
        section("model", serde_json::to_value(ModelConfig::default()).unwrap());
        section("slices", serde_json::to_value(SliceConfig::default()).unwrap());
        section("cv", serde_json::to_value(CvSection::default()).unwrap());
        section("seeds", serde_json::to_value(Seeds::default()).unwrap());
        let mut training = serde_json::to_value(TrainingConfig::default()).unwrap();
        training.as_object_mut().unwrap().remove("seed");
        section("training", training);
    }
}
