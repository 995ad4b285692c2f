use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn voxfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxfuse"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("VOXFUSE_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cohort(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = voxfuse(
        &["phantom-gen", "--n", &n.to_string(), "--size", "16", "--seed", &seed.to_string(), "--out", out.to_str().unwrap()],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.csv")
}

fn small_config(dir: &Path, name: &str, mode: &str, manifest: &Path) -> PathBuf {
    let cfg = json!({
        "experiment": name,
        "mode": mode,
        "manifest": manifest,
        "output_dir": dir.join("runs"),
        "cv": {"k": 3},
        "model": if mode == "cv3d" {
            json!({"encoder_channels": [4, 8, 8], "embedding_dim": 8, "fused_dim": 32, "head_hidden": 8})
        } else {
            json!({"encoder_channels": [4, 8, 8], "embedding_dim": 8, "fused_dim": 8, "head_hidden": 8})
        },
        "training": {"max_epochs": 3, "early_stop_patience": 2, "learning_rate": 0.001},
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn phantom_gen_rejects_single_subject() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxfuse(&["phantom-gen", "--n", "1", "--seed", "1", "--out", "c"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("c/manifest.csv").exists());
}

#[test]
fn phantom_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = cohort(dir.path(), "a", 6, 11);
    let b = cohort(dir.path(), "b", 6, 11);
    assert_eq!(fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    let rel = |root: &Path| {
        let mut v: Vec<_> = fs::read_dir(root.join("volumes")).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (ra, rb) = (a.parent().unwrap(), b.parent().unwrap());
    assert_eq!(rel(ra), rel(rb));
    for f in rel(ra) {
        assert!(fs::read(ra.join("volumes").join(&f)).unwrap() == fs::read(rb.join("volumes").join(&f)).unwrap(), "{f:?}");
    }
    let c = cohort(dir.path(), "c", 6, 12);
    assert_ne!(fs::read_to_string(&a).unwrap(), fs::read_to_string(&c).unwrap());
}

#[test]
fn misspelled_mode_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"experiment":"x","mode":"cv_3d","manifest":"m.csv","output_dir":"o"}"#).unwrap();
    let o = voxfuse(&["run", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mode"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&voxfuse(&["run", "--confg", "x.json"], dir.path())), 2);
}

#[test]
fn schema_is_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxfuse(&["schema"], dir.path());
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["properties"]["mode"].is_object());
}

#[test]
fn cv3d_run_is_byte_reproducible_and_feeds_gradcam() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d, "c", 12, 5);
    let cfg = small_config(d, "cv", "cv3d", &manifest);
    let run = |out: &str| {
        let o = voxfuse(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        d.join(out).join("cv")
    };
    let (r1, r2) = (run("o1"), run("o2"));
    for f in ["fold_plan.json", "audit.json", "report.json", "predictions.csv"] {
        assert!(fs::read(r1.join(f)).unwrap() == fs::read(r2.join(f)).unwrap(), "{f} differs");
    }
    // the resolved config records the output directory, everything else hashes the same
    let hashes = |r: &Path| {
        let mut v = read_json(&r.join("artifacts.json"));
        v.as_array_mut().unwrap().retain(|a| a["path"] != json!("config.resolved.json"));
        v
    };
    assert_eq!(hashes(&r1), hashes(&r2));
    assert!(!r1.join("run_info.json").exists());
    assert_eq!(read_json(&r1.join("audit.json"))["clean"], json!(true));
    let report = read_json(&r1.join("report.json"));
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let artifacts = read_json(&r1.join("artifacts.json"));
    let listed: Vec<&str> = artifacts.as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    for f in ["checkpoints/fold0.safetensors", "curves/loss.svg", "curves/loss.png", "plots/fold_accuracy.svg"] {
        assert!(listed.contains(&f), "{f} missing from {listed:?}");
    }

    // every subject is tested exactly once
    let csv = fs::read_to_string(r1.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);

    let test0: Vec<String> = serde_json::from_value(read_json(&r1.join("fold_plan.json"))["folds"][0]["test"].clone()).unwrap();
    let ckpt = r1.join("checkpoints/fold0.safetensors");
    let gradcam = |branch: &str, out: &str| {
        voxfuse(
            &[
                "gradcam",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--manifest",
                manifest.to_str().unwrap(),
                "--subject",
                &test0[0],
                "--branch",
                branch,
                "--out",
                out,
            ],
            d,
        )
    };
    let bogus = gradcam("FLAIR", "g0");
    assert_eq!(code(&bogus), 2, "{}", stderr(&bogus));
    for out in ["g1", "g2"] {
        let o = gradcam("T1", out);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let stats = format!("{}_T1_class1_stats.json", test0[0]);
    assert_eq!(fs::read_to_string(d.join("g1").join(&stats)).unwrap(), fs::read_to_string(d.join("g2").join(&stats)).unwrap());
    let nii = format!("{}_T1_class1.nii.gz", test0[0]);
    assert!(fs::read(d.join("g1").join(&nii)).unwrap() == fs::read(d.join("g2").join(&nii)).unwrap());
    let s = read_json(&d.join("g1").join(&stats));
    assert_eq!(s["target_branch"], json!("T1"));
    assert!(s["regions"]["ventricle"]["voxels"].as_u64().unwrap() > 0);
    assert_eq!(code(&gradcam("mean", "g3")), 0);
}

#[test]
fn data_root_flag_and_env_locate_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d, "c", 10, 5);
    // manifest copied away from its volumes; only an explicit root finds them
    fs::create_dir(d.join("elsewhere")).unwrap();
    let moved = d.join("elsewhere/manifest.csv");
    fs::copy(&manifest, &moved).unwrap();
    let cfg = small_config(d, "dr", "holdout_slice_subjectlevel", &moved);
    let o = voxfuse(&["run", "--config", cfg.to_str().unwrap()], d);
    assert_ne!(code(&o), 0);
    let root = manifest.parent().unwrap().to_str().unwrap().to_string();
    let o = voxfuse(&["run", "--config", cfg.to_str().unwrap(), "--data-root", &root], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_voxfuse"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--output-dir", "env"])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("VOXFUSE_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn slice_level_diagnostic_completes_but_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = cohort(d, "c", 8, 2);
    let cfg = small_config(d, "diag", "slice_level_diagnostic", &manifest);
    let o = voxfuse(&["run", "--config", cfg.to_str().unwrap()], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let run = d.join("runs/diag");
    let report = read_json(&run.join("report.json"));
    assert_eq!(report["valid"], json!(false));
    assert_eq!(read_json(&run.join("audit.json"))["clean"], json!(false));
    assert!(run.join("artifacts.json").exists());

    let cfg = small_config(d, "subj", "holdout_slice_subjectlevel", &manifest);
    let o = voxfuse(&["run", "--config", cfg.to_str().unwrap()], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&d.join("runs/subj/report.json"))["valid"], json!(true));
}
