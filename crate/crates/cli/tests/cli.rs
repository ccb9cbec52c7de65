use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "synth": {"users": 120, "videos": 80},
  "cluster": {"k": 4},
  "training": {"max_epochs": 2},
  "embed": {"training": {"max_epochs": 2}, "model": {"breakpoints": 16}},
  "evaluation": {"min_fit_support": 30}
}"#;

fn rad(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rad"))
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch rad")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn ok(o: &Output) {
    assert!(o.status.success(), "rad failed: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stage_by_stage_chain_produces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    for stage in [
        "simulate",
        "split",
        "cluster",
        "build-cdfs",
        "train-embed",
        "label",
        "train-model",
        "evaluate",
        "report",
    ] {
        ok(&rad(&cfg, &out, &[stage]));
        assert!(out.join("manifests").join(format!("{stage}.json")).is_file(), "{stage} wrote no manifest");
    }
    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("eval/metrics.json")).unwrap()).unwrap();
    for method in ["raw", "pcr", "d2q", "rad_u", "rad_v", "rad_uv"] {
        let m = &metrics["methods"][method];
        for key in ["mae", "xauc", "xgauc", "user_group_xauc", "video_group_xauc"] {
            assert!(m[key].is_number(), "{method}.{key} missing");
        }
    }
    for table in ["table1.csv", "table2.csv", "table3.csv", "densities.csv"] {
        assert!(out.join("report").join(table).is_file());
    }
}

#[test]
fn manifests_hash_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&rad(&cfg, &out, &["simulate"]));
    ok(&rad(&cfg, &out, &["split"]));
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifests/split.json")).unwrap()).unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs[0]["path"], "data/interactions.csv");
    let simulate: Value = serde_json::from_slice(&std::fs::read(out.join("manifests/simulate.json")).unwrap()).unwrap();
    let produced = simulate["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["path"] == "data/interactions.csv")
        .unwrap();
    assert_eq!(inputs[0]["sha256"], produced["sha256"]);
    assert!(manifest["config"]["duration_bins"].is_number());
}

#[test]
fn evaluate_without_models_is_a_dependency_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let no_fit = ["--set", "evaluation.distribution_fit=false"];
    for stage in ["simulate", "split", "build-cdfs", "label"] {
        ok(&rad(&cfg, &out, &[&[stage][..], &no_fit[..]].concat()));
    }
    let o = rad(&cfg, &out, &[&["evaluate"][..], &no_fit[..]].concat());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-model"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert_eq!(rad(&cfg, &out, &["simulate", "--set", "sead=1"]).status.code(), Some(2));
    assert_eq!(rad(&cfg, &out, &["simulate", "--set", "duration_bins=0"]).status.code(), Some(2));
    assert_eq!(rad(&cfg, &out, &["simulate", "--set", "synth.users=0"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let o = rad(
        &cfg,
        &out,
        &["config", "--seed", "11", "--labels", "rad_v,raw", "--set", "training.batch_size=64"],
    );
    ok(&o);
    let resolved: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["labels"], serde_json::json!(["rad_v", "raw"]));
    assert_eq!(resolved["training"]["batch_size"], 64);
    assert_eq!(resolved["synth"]["users"], 120);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&rad(&cfg, &a, &["all", "--threads", "1"]));
    ok(&rad(&cfg, &b, &["all", "--threads", "3"]));
    for file in [
        "report/table1.csv",
        "report/table2.csv",
        "report/table3.csv",
        "report/densities.csv",
        "eval/metrics.json",
        "eval/predictions.csv",
        "manifests/report.json",
    ] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}
