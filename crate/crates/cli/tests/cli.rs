use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sabre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sabre"))
        .args(args)
        .env_remove("SABRE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn presets_lists_every_family() {
    let o = sabre(&["presets"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["p2p5-benign", "p2p5-majority-compromised", "n50-trojan-10", "graph-drop20", "graph-timevarying"] {
        assert!(text.contains(name), "{name} missing");
    }
    assert!(text.contains("[expected-fail]"));
}

#[test]
fn run_writes_artifacts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = sabre(&[
        "run", "--preset", "p2p5-benign", "--set", "t_max=300", "--out", out.to_str().unwrap(), "--format", "csv",
        "--format", "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["records.csv", "records.json", "summary.json", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["finals"].as_array().unwrap().len(), 5);
    assert!(summary["max_benign_linf_error"].as_f64().unwrap() < 0.05);
    let resolved = json(&out.join("resolved_config.json"));
    assert_eq!(resolved["scenario"]["t_max"], 300);
    assert_eq!(resolved["scenario"]["params"]["kappa"], 2.0);

    let replayed = dir.path().join("replayed.json");
    let o = sabre(&["replay", out.to_str().unwrap(), "--write", replayed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&replayed).unwrap(), fs::read(out.join("summary.json")).unwrap());
}

#[test]
fn identical_records_across_reruns_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--preset", "p2p5-node4-labelflip", "--set", "t_max=400", "--seed", "11"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out.to_str().unwrap()]);
        let o = sabre(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("a", &["--workers", "1"]);
    let b = run("b", &["--workers", "4"]);
    let c = run("c", &["--workers", "1"]);
    let records = |d: &Path| fs::read(d.join("records.csv")).unwrap();
    assert_eq!(records(&a), records(&b));
    assert_eq!(records(&a), records(&c));

    // rerun from the emitted resolved config
    let d = dir.path().join("d");
    let cfg = a.join("resolved_config.json");
    let o = sabre(&["run", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(records(&a), records(&d));
}

#[test]
fn bayp2pfl_summary_reports_bias() {
    let dir = tempfile::tempdir().unwrap();
    // coordinates node 4 observes; node 3's data pushes coordinate 0 the other way
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"schema_version": 1, "preset": "p2p5-bayp2pfl-labelflip", "analysis": {"bias": {"coordinates": [1, 2]}}}"#,
    )
    .unwrap();
    let o = sabre(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&dir.path().join("summary.json"));
    let verdicts: Vec<&str> = summary["bias"].as_array().unwrap().iter().map(|b| b["verdict"].as_str().unwrap()).collect();
    assert_eq!(verdicts, vec!["biased"; 5]);
}

#[test]
fn config_errors_exit_2_with_the_field() {
    let o = sabre(&["run", "--preset", "p2p5-benign", "--set", "params.kapa=3", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kapa"));
    let o = sabre(&["run", "--preset", "no-such-preset"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p2p5-benign"));
    let o = sabre(&["run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schema_version": 1, "preset": "p2p5-benign", "verbose": true}"#).unwrap();
    let o = sabre(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("verbose"));
}

#[test]
fn io_errors_exit_4() {
    let o = sabre(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(4));
    let o = sabre(&["replay", "/nonexistent/dir"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn invariant_breach_exits_3_naming_client_and_tick() {
    let dir = tempfile::tempdir().unwrap();
    let o = sabre(&[
        "run", "--preset", "n50-bitflip-10", "--set", "algorithm=bayp2pfl", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("client") && err.contains("tick"), "{err}");
    assert!(dir.path().join("records.csv").exists());
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn output_dir_defaults_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sabre"))
        .args(["run", "--preset", "p2p5-benign", "--set", "t_max=50"])
        .env("SABRE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn verify_reports_assumptions() {
    let o = sabre(&["verify", "--preset", "p2p5-node4-labelflip"]);
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["sufficiency", "connectivity", "joint_learning"] {
        assert_eq!(r[k]["satisfied"], true, "{k}");
    }

    let o = sabre(&[
        "verify", "--preset", "p2p5-node4-labelflip", "--set", "task.clients.3.support=[0]", "--set",
        "task.clients.4.support=[2]",
    ]);
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["joint_learning"]["satisfied"], false);
    assert!(r["joint_learning"]["violations"].as_array().unwrap().contains(&serde_json::json!([5, 4])));

    let o = sabre(&["verify", "--preset", "n50-generalrandom-10"]);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = r["detection"][0]["probability"].as_f64().unwrap();
    assert_eq!(p, sabre_core::adversary::detection_probability(20, 0.4, 0.3).unwrap());
}
