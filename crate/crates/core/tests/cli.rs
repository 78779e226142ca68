use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn statctrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statctrl"))
        .args(args)
        .env("STATCTRL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, doc: Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_triad() -> Value {
    json!({
        "preset": "triad-regime1",
        "ensemble_size": 200,
        "kernels": { "t_sample": 100.0, "tau_max": 2.0 },
        "protocol": { "t_spin": 2.0, "t_pert": 1.0, "horizon": 1.0 }
    })
}

#[test]
fn validate_accepts_a_preset_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ok.json", json!({ "preset": "lorenz96-5to8" }));
    let out = statctrl(&["validate", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("configuration is valid"));
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", json!({ "preset": "triad-regime1", "control": { "alpha": [1.0, -1.0, 1.0] } }));
    let out = statctrl(&["validate", &bad]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("nonpositive control weight"));

    let out = statctrl(&["run", &bad, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let garbled = dir.path().join("garbled.json");
    fs::write(&garbled, "{ \"preset\": ").unwrap();
    assert_eq!(code(&statctrl(&["validate", garbled.to_str().unwrap()])), 1);
    assert_eq!(code(&statctrl(&["validate", dir.path().join("missing.json").to_str().unwrap()])), 1);
    assert_eq!(code(&statctrl(&["run", "--preset", "no-such-preset", "--out", "unused"])), 1);
    assert_eq!(code(&statctrl(&["run", "--preset", "triad-regime1", "--strategy", "sideways", "--out", "unused"])), 1);
    assert_eq!(code(&statctrl(&["frobnicate"])), 1);
    assert_eq!(code(&statctrl(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two_and_leave_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let kernels = dir.path().join("k");
    let l96 = write_config(
        dir.path(),
        "l96.json",
        json!({
            "preset": "lorenz96-5to8",
            "kernels": { "t_sample": 20.0, "tau_max": 1.0, "t_spin": 1.0 }
        }),
    );
    assert_eq!(code(&statctrl(&["kernels", &l96, "--out", kernels.to_str().unwrap()])), 0);

    let mut doc = small_triad();
    doc["kernels_from"] = json!(kernels);
    let cfg = write_config(dir.path(), "mismatch.json", doc);
    let out_dir = dir.path().join("run");
    let out = statctrl(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different system"));
    assert!(out_dir.join("FAILED").exists());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", small_triad());
    let out_dir = dir.path().join("run");
    let out = statctrl(&["run", &cfg, "--seed", "3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for file in ["manifest.json", "summary.json", "equilibrium.json", "control.csv", "optimal_energy.csv", "series_uncontrolled.csv"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }
    for s in ["low-lr", "low-closure", "high-lr", "high-closure"] {
        for file in [format!("forcing_{s}.csv"), format!("forcing_{s}.json"), format!("series_{s}.csv")] {
            assert!(out_dir.join(&file).exists(), "{file}");
        }
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["files"]["control.csv"].as_str().unwrap().len() == 64);

    let header = fs::read_to_string(out_dir.join("control.csv")).unwrap();
    assert!(header.starts_with("t,K,E_star,C_1,C_2,C_3,dC_1,dC_2,dC_3\n"));
    let header = fs::read_to_string(out_dir.join("forcing_high-lr.csv")).unwrap();
    assert!(header.starts_with("t,kappa_1,kappa_2,kappa_3,du_1,du_2,du_3\n"));
}

#[test]
fn stages_can_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", small_triad());

    let ctl = dir.path().join("control");
    let out = statctrl(&["control", &cfg, "--out", ctl.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ctl.join("control.csv").exists());

    let inv = dir.path().join("invert");
    let out = statctrl(&["invert", &cfg, "--strategy", "high-closure", "--out", inv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(inv.join("forcing_high-closure.csv").exists());
    assert_eq!(code(&statctrl(&["invert", &cfg, "--strategy", "medium-lr", "--out", inv.to_str().unwrap()])), 1);

    let none = dir.path().join("none");
    let out = statctrl(&["run", &cfg, "--strategy", "none", "--out", none.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(none.join("series_uncontrolled.csv").exists());
    assert!(!none.join("forcing_high-lr.csv").exists());
}

#[test]
fn outputs_do_not_depend_on_the_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", small_triad());
    let mut hashes = vec![];
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let out = Command::new(env!("CARGO_BIN_EXE_statctrl"))
            .args(["run", &cfg, "--out", out_dir.to_str().unwrap()])
            .env("STATCTRL_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        hashes.push(manifest["files"].clone());
    }
    assert_eq!(hashes[0], hashes[1]);
}
