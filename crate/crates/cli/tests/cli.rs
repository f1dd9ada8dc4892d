use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoclip"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn docs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs")
}

fn run_in<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(dir: &Path, args: &[S]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, path: &Path) {
    let schema = read_json(&docs().join(format!("{schema_name}.schema.json")));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance = read_json(path);
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} violates {schema_name}: {errors:?}", path.display());
}

/// synth, curate, anchors and train with the bundled smoke config.
fn prepare(dir: &Path, extra: &[&str]) {
    let config = smoke_config();
    let c = config.to_str().unwrap();
    let with = |args: &[&str]| -> Vec<String> {
        ["--config", c].iter().chain(extra).chain(args).map(|s| s.to_string()).collect()
    };
    run_in(dir, &with(&["synth", "--out", "data"]));
    run_in(dir, &with(&["curate", "--archive", "data/images", "--out", "work/curation.csv"]));
    run_in(dir, &with(&["anchors", "--archive", "data/images", "--prompts", "data/prompts", "--out", "work/anchors"]));
    run_in(
        dir,
        &with(&[
            "train",
            "--archive",
            "data/images",
            "--curation",
            "work/curation.csv",
            "--anchors",
            "work/anchors",
            "--out",
            "work/ckpt",
        ]),
    );
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    let line: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(line["error"], "usage");
    assert!(line["usage"].as_str().unwrap().starts_with("Usage:"));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("dump-embeddings"));
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().current_dir(dir.path()).args(["curate", "--archive", "absent"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let line: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(line["error"], "validation");
}

#[test]
fn bad_config_value_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{ "train": { "batch_size": 0 } }"#).unwrap();
    let out = bin().current_dir(dir.path()).args(["--config", "bad.json", "synth", "--out", "d"]).output().unwrap();
    assert!(out.status.success());
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "bad.json", "curate", "--archive", "d/images", "--out", "c.csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "bad.json", "anchors", "--archive", "d/images", "--prompts", "d/prompts", "--out", "a"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "bad.json", "train", "--archive", "d/images", "--curation", "c.csv", "--anchors", "a"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("batch_size"), "{stderr}");
}

#[test]
fn pipeline_smoke_run_emits_valid_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, &[]);
    let config = smoke_config();
    let c = config.to_str().unwrap();
    run_in(
        d,
        &[
            "--config",
            c,
            "eval",
            "--archive",
            "data/images",
            "--anchors",
            "work/anchors",
            "--checkpoint",
            "work/ckpt",
            "--findings",
            "pneumothorax,atelectasis",
            "--out",
            "work/report.json",
        ],
    );
    let report = read_json(&d.join("work/report.json"));
    assert!(report["baseline"]["findings"][0]["auc"].is_f64());
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["baseline"]["findings"].as_array().unwrap().len(), 2);
    assert!(report["aggregate"]["findings"][0]["auc"]["mean"].is_f64());
    assert_eq!(report["seed"], 7);
    assert_eq!(report["config"]["train"]["seeds"], serde_json::json!([7, 8]));

    run_in(d, &["--config", c, "dump-embeddings", "--archive", "data/images", "--out", "work/teacher.csv"]);
    let csv = fs::read_to_string(d.join("work/teacher.csv")).unwrap();
    assert!(csv.starts_with("id,label,pc1,pc2,e0,"));
    assert_eq!(csv.lines().count(), 1 + 500);

    for (schema, file) in [
        ("archive-manifest", "data/images/manifest.json"),
        ("archive-manifest", "data/prompts/manifest.json"),
        ("synth-truth", "data/truth.json"),
        ("curation-report", "work/curation.json"),
        ("anchors-manifest", "work/anchors/anchors.json"),
        ("checkpoint-manifest", "work/ckpt/seed-7/checkpoint.json"),
        ("train-log", "work/ckpt/seed-7/train_log.json"),
        ("train-summary", "work/ckpt/train.json"),
        ("train-timing", "work/ckpt/timing.json"),
        ("eval-report", "work/report.json"),
    ] {
        assert_valid(schema, &d.join(file));
    }
    assert_valid("pipeline-config", &config);
}

#[test]
fn ablate_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = smoke_config();
    let c = config.to_str().unwrap();
    run_in(d, &["--config", c, "synth", "--out", "data"]);
    run_in(d, &["--config", c, "ablate", "--archive", "data/images", "--prompts", "data/prompts", "--out", "abl.json"]);
    assert_valid("ablation-report", &d.join("abl.json"));
    let report = read_json(&d.join("abl.json"));
    let rows = report["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["target_auc"]["mean"].is_f64()));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, &["--seed", "21"]);
    let truth = read_json(&d.join("data/truth.json"));
    assert_eq!(truth["config"]["seed"], 21);
    let curation = read_json(&d.join("work/curation.json"));
    assert_eq!(curation["seed"], 21);
    assert_eq!(curation["config"]["seed"], 21);
    let summary = read_json(&d.join("work/ckpt/train.json"));
    assert_eq!(summary["seeds"], serde_json::json!([21, 22]));
    assert!(d.join("work/ckpt/seed-22/checkpoint.json").exists());
}

#[test]
fn outputs_are_reproduced_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    prepare(a.path(), &[]);
    prepare(b.path(), &[]);
    for file in [
        "data/images/teacher.f32",
        "data/prompts/teacher.f32",
        "work/curation.csv",
        "work/anchors/anchors.f32",
        "work/ckpt/seed-7/head.f32",
        "work/ckpt/seed-8/train_log.json",
        "work/ckpt/train.json",
    ] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    // Rerunning in place overwrites with identical bytes.
    let before = fs::read(a.path().join("work/ckpt/seed-7/head.f32")).unwrap();
    prepare(a.path(), &[]);
    assert_eq!(before, fs::read(a.path().join("work/ckpt/seed-7/head.f32")).unwrap());
}

#[test]
fn bundled_schemas_are_current() {
    for (name, schema) in protoclip_cli::schemas() {
        let path = docs().join(format!("{name}.schema.json"));
        let on_disk = read_json(&path);
        assert_eq!(on_disk, schema, "{} is stale; regenerate with `protoclip schema --out docs`", path.display());
    }
}

#[test]
fn bundled_configs_parse_and_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let smoke = protoclip_cli::PipelineConfig::load(&configs.join("smoke.json")).unwrap();
    assert_eq!(smoke.seed, Some(7));
    smoke.train.validate().unwrap();
    smoke.synth.validate().unwrap();
}
