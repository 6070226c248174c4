use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn neurodebug(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurodebug"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("NEURODEBUG_DEVICE")
        .output()
        .unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn headless_inspect_visualize_edit_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("runs");
    let out = json_of(&neurodebug(
        &store,
        &["--json", "inspect", "--planted-seed", "7", "--model-seed", "1", "--fit-decision-layer"],
    ));
    assert_eq!(out["status"], "completed");
    let run = out["run_id"].as_str().unwrap().to_string();
    let core = out["ranking"]["core_neurons"][0].as_u64().unwrap().to_string();
    let stored: Value = serde_json::from_slice(&std::fs::read(store.join(&run).join("ranking.json")).unwrap()).unwrap();
    assert_eq!(stored, out["ranking"]);

    let g = json_of(&neurodebug(
        &store,
        &["--json", "visualize", "--run", &run, "--neurons", &core, "--classes", "target", "--steps", "10"],
    ));
    assert_eq!(g["entries"].as_array().unwrap().len(), 1);

    let target = format!("1:{core}");
    let e = json_of(&neurodebug(
        &store,
        &["--json", "edit", "--run", &run, "--target", &target, "--preset", "planted", "--epochs", "5"],
    ));
    assert_eq!(e["plan"]["epochs"], 5);

    let table = neurodebug(&store, &["evaluate", "--run", &run]);
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.contains("base/test") && text.contains("Worst group"));
    assert!(text.contains(e["key"].as_str().unwrap()));
}

#[test]
fn config_file_overrides_the_store_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("wb.toml");
    let from_file = dir.path().join("file-store");
    std::fs::write(&cfg, format!("store = {:?}\n", from_file.to_string_lossy())).unwrap();
    let out = neurodebug(
        &dir.path().join("flag-store"),
        &["--config", cfg.to_str().unwrap(), "evaluate", "--run", "run-missing"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown run"));
    assert!(from_file.is_dir());
    assert!(!dir.path().join("flag-store").exists());
}

#[test]
fn unavailable_device_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_neurodebug"))
        .args(["--store", dir.path().to_str().unwrap(), "evaluate", "--run", "x"])
        .env("NEURODEBUG_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cuda:0"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = neurodebug(dir.path(), &["inspect", "--model", "no-such-model", "--planted-seed", "1"]);
    assert!(!out.status.success());
    let out = neurodebug(dir.path(), &["edit", "--run", "r", "--target", "1:2", "--o", "1", "--suggest-o"]);
    assert_eq!(out.status.code(), Some(2));
}
