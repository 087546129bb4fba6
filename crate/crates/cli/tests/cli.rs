use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxctl"))
}

#[test]
fn check_exits_zero() {
    let out = bin().arg("check").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["checks"]["gradient"]["pass"], true);
    assert_eq!(v["checks"]["steady_state"]["pass"], true);
    assert_eq!(v["checks"]["causality"]["pass"], true);
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = bin()
            .args(["simulate", "--seed", "7", "--steps", "15"])
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("simulate.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);

    let out_dir = dir.path().join("c");
    let out = bin()
        .args(["simulate", "--seed", "8", "--steps", "15"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let c = std::fs::read(out_dir.join("simulate.csv")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn eval_without_checkpoint_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt.json"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "checkpoint");
    assert!(v["error"]["message"].as_str().unwrap().contains("ckpt.json"));
}

#[test]
fn sample_meta_writes_versioned_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["sample-meta", "--count", "3", "--seed", "5"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("meta.jsonl")).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["format"], "meta-draws");
    assert_eq!(lines.count(), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["simulate", "--frobnicate"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_roundtrips_through_file() {
    // a config written from the desk preset must load and drive simulate
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.toml");
    let text = ctxctl_core::evalharness::AppConfig::desk().to_toml().unwrap();
    std::fs::write(&config_path, text).unwrap();
    let out = bin()
        .args(["simulate", "--seed", "3", "--steps", "10"])
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("simulate.csv").exists());
}

#[test]
fn missing_config_file_is_reported() {
    let out = bin()
        .args(["check", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
}
