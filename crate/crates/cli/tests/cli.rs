use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn sepsis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepsis")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str::<Value>(line).expect("JSON error")["error"].clone()
}

#[test]
fn simulate_is_deterministic_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = sepsis(tmp.path(), &["simulate", "--out", "a"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = sepsis(tmp.path(), &["simulate", "--out", "b", "--workers", "2"]);
    assert!(b.status.success());
    for f in ["trajectory.csv", "objective.csv", "summary.json"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let m = manifest(&tmp.path().join("a"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 0);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for e in outputs {
        let bytes = std::fs::read(tmp.path().join("a").join(e["path"].as_str().unwrap())).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(e["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert!(m["metrics"]["wall_seconds"].as_f64().unwrap() >= 0.0);

    // A manifest works as a config and reproduces the run.
    let c = sepsis(tmp.path(), &["simulate", "--out", "c", "--config", "a/manifest.json"]);
    assert!(c.status.success());
    assert_eq!(
        std::fs::read(tmp.path().join("a/trajectory.csv")).unwrap(),
        std::fs::read(tmp.path().join("c/trajectory.csv")).unwrap()
    );
}

#[test]
fn tnf_persistent_keeps_tnf_high_after_clearance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sepsis(tmp.path(), &["simulate", "--preset", "tnf-persistent", "--out", "o"]);
    assert!(out.status.success());
    let (h, rows) = csv(&tmp.path().join("o/trajectory.csv"));
    let (t, p) = (column(&h, "T"), column(&h, "P"));
    let tail = &rows[rows.len() - 10..];
    let mean_t = tail.iter().map(|r| r[t]).sum::<f64>() / tail.len() as f64;
    assert!(mean_t > 10.0 * rows[0][t], "trailing TNF {mean_t} vs initial {}", rows[0][t]);
    assert!(rows.last().unwrap()[p] < 1e-3 * rows[0][p]);
    assert_eq!(rows.len(), 51);
}

#[test]
fn zero_state_stays_put() {
    let tmp = tempfile::tempdir().unwrap();
    let zeros = vec!["0"; 20].join(",");
    write_config(tmp.path(), "zero.json", &format!(r#"{{"initial": [{zeros}], "t_f": 20}}"#));
    let out = sepsis(tmp.path(), &["simulate", "--config", "zero.json", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = csv(&tmp.path().join("o/trajectory.csv"));
    let r1 = column(&h, "r1");
    for row in &rows {
        for (i, v) in row[1..21].iter().enumerate() {
            if i + 1 != r1 {
                assert_eq!(*v, 0.0, "{}", h[i + 1]);
            }
        }
    }
}

#[test]
fn control_file_is_applied() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("time,u_p,u_T\n");
    for k in 0..50 {
        text.push_str(&format!("{k},0,1\n"));
    }
    std::fs::write(tmp.path().join("u.csv"), text).unwrap();
    write_config(tmp.path(), "c.json", r#"{"control_file": "u.csv"}"#);
    assert!(sepsis(tmp.path(), &["simulate", "--out", "none"]).status.success());
    let out = sepsis(tmp.path(), &["simulate", "--config", "c.json", "--out", "full"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let j = |d: &str| -> f64 {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join(d).join("summary.json")).unwrap()).unwrap();
        v["objective"].as_f64().unwrap()
    };
    assert!(j("full") < 0.01 * j("none"));
}

#[test]
fn pitchfork_reference_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "pf.json",
        r#"{"bifurcation": {"pitchfork": true, "grid": {"linspace": {"start": -1.0, "stop": 1.0, "points": 21}}, "cycle": {"enabled": false}}}"#,
    );
    let out = sepsis(tmp.path(), &["bifurcate", "--config", "pf.json", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("o/diagram.json")).unwrap()).unwrap();
    let found = d["detected_bifurcations"].as_array().unwrap();
    assert!(found.iter().any(|b| b["location"].as_f64().unwrap().abs() < 1e-3));
    assert!(tmp.path().join("o/diagram.csv").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "bad.json", r#"{"no_such_field": 1}"#);
    let out = sepsis(tmp.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "json");

    let out = sepsis(tmp.path(), &["simulate", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_error(&out);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["command"], "simulate");

    let out = sepsis(tmp.path(), &["simulate", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));

    write_config(tmp.path(), "short.json", r#"{"integrator": {"max_steps": 5}}"#);
    let out = sepsis(tmp.path(), &["simulate", "--config", "short.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_error(&out)["kind"], "numeric");
    // The manifest is still written after a failure.
    assert_eq!(manifest(&tmp.path().join("o"))["command"], "simulate");
}

#[test]
fn data_pipeline_with_tamper_detection() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "small.json",
        r#"{
            "t_f": 6, "d": 2,
            "dataset": {"n_settings": 2},
            "bo": {"n_init": 3, "n_iter": 2, "local_search": {"steps": 2}},
            "train": {"hidden": 4, "epochs": 5},
            "dataset_path": "data/dataset.jsonl",
            "model_path": "model/model.json"
        }"#,
    );
    let out = sepsis(tmp.path(), &["generate-data", "--config", "small.json", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("data/dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * (6 - 2 + 1));

    let out = sepsis(tmp.path(), &["train", "--config", "small.json", "--out", "model"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&tmp.path().join("model"));
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(text.as_bytes())));

    let out = sepsis(tmp.path(), &["predict", "--config", "small.json", "--out", "pred"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("pred/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval.as_array().unwrap().len(), 1);
    assert!(manifest(&tmp.path().join("pred"))["metrics"]["predict_seconds_0"].as_f64().is_some());

    std::fs::write(tmp.path().join("data/dataset.jsonl"), format!("{text}\n")).unwrap();
    let out = sepsis(tmp.path(), &["train", "--config", "small.json", "--out", "model2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["message"].as_str().unwrap().contains("does not match"));
}
