use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn dfr(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dfr"));
    cmd.args(args).env_remove("DFR_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn error_of(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {line}"));
    v["error"].clone()
}

fn small_dataset() -> Value {
    json!({ "custom": {
        "n_classes": 2, "d_core": 3, "d_spurious": 3,
        "core_noise_sigma": 1.0, "spurious_noise_sigma": 0.25, "p_corr": 0.9,
        "n_train": 240, "n_val": 120, "n_test": 160,
        "core_margin": 2.0, "spurious_margin": 2.0
    }})
}

fn run_ok(args: &[&str]) -> Output {
    let out = dfr(args, &[]);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// generate → train-erm → extract, returning the directory with features.
fn pipeline(root: &Path) -> PathBuf {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let gen = write(root, "gen.json", &json!({ "dataset": small_dataset(), "seed": 3 }));
    run_ok(&["generate", "--config", &s(gen), "--output-dir", &s(root.join("gen"))]);
    let erm = write(
        root,
        "erm.json",
        &json!({ "train": s(root.join("gen/train.dfre")), "training": { "hidden": [12], "epochs": 4 } }),
    );
    run_ok(&["train-erm", "--config", &s(erm), "--output-dir", &s(root.join("erm"))]);
    let ext = write(
        root,
        "extract.json",
        &json!({
            "model": s(root.join("erm/model.dfrm")),
            "inputs": [s(root.join("gen/train.dfre")), s(root.join("gen/val.dfre")), s(root.join("gen/test.dfre"))]
        }),
    );
    run_ok(&["extract", "--config", &s(ext), "--output-dir", &s(root.join("feat"))]);
    root.join("feat")
}

#[test]
fn full_pipeline_produces_a_dfr_result_with_a_grid_value() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let feat = pipeline(root);
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let cfg = write(
        root,
        "dfr.json",
        &json!({
            "train": s(feat.join("train.features.dfre")),
            "reweight": s(feat.join("val.features.dfre")),
            "test": s(feat.join("test.features.dfre")),
            "dfr": { "n_retrains": 2 }
        }),
    );
    run_ok(&["dfr", "--config", &s(cfg), "--output-dir", &s(root.join("dfr"))]);
    let result = read_json(&root.join("dfr/dfr_result.json"));
    let c = result["chosen_C"].as_f64().unwrap();
    assert!(dfr_core::dfr::DEFAULT_C_GRID.contains(&c), "chosen_C {c}");
    assert!(root.join("dfr/head.dfrh").exists());

    let eval = write(
        root,
        "eval.json",
        &json!({
            "predictor": { "head": s(root.join("dfr/head.dfrh")) },
            "data": s(feat.join("test.features.dfre")),
            "train": s(feat.join("train.features.dfre"))
        }),
    );
    run_ok(&["evaluate", "--config", &s(eval), "--output-dir", &s(root.join("eval"))]);
    let metrics = read_json(&root.join("eval/metrics.json"));
    assert_eq!(metrics["worst"], result["test_metrics"]["worst"]);
}

#[test]
fn manifest_records_hashes_of_inputs_and_outputs() {
    let tmp = TempDir::new().unwrap();
    let feat = pipeline(tmp.path());
    let manifest = read_json(&feat.join("manifest.json"));
    assert_eq!(manifest["command"], "extract");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
    for out in manifest["outputs"].as_array().unwrap() {
        let bytes = fs::read(feat.join(out["path"].as_str().unwrap())).unwrap();
        let hex = dfr_cli::manifest::sha256_hex(&bytes);
        assert_eq!(out["sha256"], hex.as_str());
    }
    for key in ["versions", "seed", "config", "created_unix"] {
        assert!(manifest.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let feat = pipeline(root);
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    run_ok(&[
        "extract",
        "--manifest",
        &s(feat.join("manifest.json")),
        "--output-dir",
        &s(root.join("again")),
    ]);
    for name in ["train.features.dfre", "val.features.dfre", "test.features.dfre"] {
        assert_eq!(fs::read(feat.join(name)).unwrap(), fs::read(root.join("again").join(name)).unwrap());
    }
}

#[test]
fn commands_do_not_touch_their_inputs() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    // train-erm and extract read the generated splits; their bytes must still
    // match what generate recorded.
    let feat = pipeline(root);
    let gen = root.join("gen");
    let recorded = read_json(&gen.join("manifest.json"));
    for out in recorded["outputs"].as_array().unwrap() {
        let bytes = fs::read(gen.join(out["path"].as_str().unwrap())).unwrap();
        assert_eq!(out["sha256"], dfr_cli::manifest::sha256_hex(&bytes).as_str());
    }
    assert!(feat.exists());
}

#[test]
fn changed_input_blocks_a_manifest_rerun() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let feat = pipeline(root);
    let mut bytes = fs::read(root.join("gen/val.dfre")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(root.join("gen/val.dfre"), bytes).unwrap();
    let out = dfr(
        &[
            "extract",
            "--manifest",
            &feat.join("manifest.json").to_string_lossy(),
            "--output-dir",
            &root.join("again").to_string_lossy(),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(error_of(&out)["message"].as_str().unwrap().contains("changed"));
}

#[test]
fn unknown_key_is_a_schema_error_with_its_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        &json!({ "dataset": { "preset": { "name": "dominoes", "p_cor": 0.9 } } }),
    );
    let out = dfr(
        &["generate", "--config", &cfg.to_string_lossy(), "--output-dir", &tmp.path().join("o").to_string_lossy()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = error_of(&out);
    assert_eq!(err["kind"], "schema");
    assert_eq!(err["path"], "dataset.preset.p_cor");
    assert!(err["message"].as_str().unwrap().contains("p_cor"));
    assert!(!tmp.path().join("o").exists(), "no work before validation");
}

#[test]
fn wrong_type_names_the_nested_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        &json!({ "train": "x", "reweight": "y", "test": "z", "dfr": { "n_retrains": "ten" } }),
    );
    let out = dfr(&["dfr", "--config", &cfg.to_string_lossy()], &[]);
    let err = error_of(&out);
    assert_eq!(err["kind"], "schema");
    assert_eq!(err["path"], "dfr.n_retrains");
}

#[test]
fn missing_input_file_is_reported() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "erm.json", &json!({ "train": tmp.path().join("nope.dfre") }));
    let out = dfr(
        &["train-erm", "--config", &cfg.to_string_lossy(), "--output-dir", &tmp.path().join("o").to_string_lossy()],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_of(&out)["kind"], "missing_file");
}

#[test]
fn seed_precedence_is_env_then_flag_then_document() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "gen.json", &json!({ "dataset": small_dataset(), "seed": 1 }));
    let c = cfg.to_string_lossy().into_owned();
    let seed_of = |dir: &str, args: &[&str], env: &[(&str, &str)]| {
        let out_dir = tmp.path().join(dir);
        let mut all = vec!["generate", "--config", &c, "--output-dir"];
        let o = out_dir.to_string_lossy().into_owned();
        all.push(&o);
        all.extend_from_slice(args);
        let out = dfr(&all, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read_json(&out_dir.join("manifest.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("doc", &[], &[]), 1);
    assert_eq!(seed_of("flag", &["--seed", "7"], &[]), 7);
    assert_eq!(seed_of("env", &["--seed", "7"], &[("DFR_SEED", "42")]), 42);
    let a = fs::read(tmp.path().join("doc/train.dfre")).unwrap();
    let b = fs::read(tmp.path().join("flag/train.dfre")).unwrap();
    assert_ne!(a, b, "different seeds draw different data");
}

#[test]
fn manifest_for_another_command_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let feat = pipeline(tmp.path());
    let out = dfr(&["dfr", "--manifest", &feat.join("manifest.json").to_string_lossy()], &[]);
    assert!(!out.status.success());
    assert!(error_of(&out)["message"].as_str().unwrap().contains("extract"));
}

#[test]
fn verify_runs_selected_criteria() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "v.json", &json!({ "criteria": [3, 4] }));
    let out = run_ok(&["verify", "--config", &cfg.to_string_lossy(), "--output-dir", &tmp.path().join("v").to_string_lossy()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion")).count(), 2);
    let report = read_json(&tmp.path().join("v/verify.json"));
    assert_eq!(report["criteria"][0]["status"], "pass");
}

#[test]
fn sweep_l1_writes_json_and_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "sweep.json",
        &json!({
            "suite": { "l1": { "dataset": small_dataset(), "n_outer_seeds": 2 } },
            "dfr": { "n_retrains": 2, "c_grid": [1.0, 0.1] }
        }),
    );
    let dir = tmp.path().join("s");
    run_ok(&["sweep", "--config", &cfg.to_string_lossy(), "--output-dir", &dir.to_string_lossy()]);
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let report = read_json(&dir.join("report.json"));
    assert_eq!(report["pairs"].as_array().unwrap().len(), 2);
}
