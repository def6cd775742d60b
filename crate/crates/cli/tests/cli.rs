use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_MATRIX: &str = r#"{
  "workflows": [{"kind": "chain", "n": 6, "file_size": 200000000}],
  "se_conditions": ["d1f1", "d3f3"],
  "cache_schemes": ["C1", "nocache"],
  "submission_modes": ["prerun(8)"],
  "site": {"n_workers": 2, "slots_per_worker": 4},
  "jobs": {"processing_time": 60.0}
}"#;

fn pilotsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilotsim")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn matrix_with_seed_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.json", SMALL_MATRIX);
    let out = tmp.path().join("out");
    let o = pilotsim(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out.join("runs.csv")), 1 + 4 * 3);
    assert_eq!(lines(&out.join("aggregate.csv")), 1 + 4);
    assert_eq!(lines(&out.join("reports.ndjson")), 12);
    assert_eq!(fs::read_dir(out.join("timeseries")).unwrap().count(), 12);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2, 3]));
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 12);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.json", SMALL_MATRIX);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(pilotsim(&["--config", &cfg, "--out", a.to_str().unwrap(), "--seeds", "2..=3", "--event-log"]).status.success());
    let manifest = a.join("manifest.json");
    assert!(pilotsim(&["--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap(), "--event-log"]).status.success());
    for f in ["runs.csv", "aggregate.csv", "reports.ndjson", "aggregate.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for dir in ["timeseries", "events"] {
        for e in fs::read_dir(a.join(dir)).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(fs::read(a.join(dir).join(&name)).unwrap(), fs::read(b.join(dir).join(&name)).unwrap(), "{name:?}");
        }
    }
}

#[test]
fn full_matrix_flag_gives_36_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "s.json",
        r#"{"workflow":"W1","se_condition":"d1f1","cache_scheme":"C1","submission_mode":"prerun(120)","seed":1}"#,
    );
    let out = tmp.path().join("out");
    let o = pilotsim(&["--config", &cfg, "--out", out.to_str().unwrap(), "--matrix", "--emit", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 37);
    for wf in ["W1", "W2", "W3"] {
        for se in ["d1f1", "d2f2", "d3f3"] {
            for scheme in ["C1", "C2", "C3", "nocache"] {
                let key = format!("{wf},{se},{scheme},prerun(120),");
                assert!(agg.lines().any(|l| l.starts_with(&key)), "{key}");
            }
        }
    }
    assert!(!out.join("reports.ndjson").exists());
}

#[test]
fn json_only_emits_no_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.json", SMALL_MATRIX);
    let out = tmp.path().join("out");
    assert!(pilotsim(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "1", "--emit", "json"]).status.success());
    assert!(out.join("reports.ndjson").exists());
    assert!(!out.join("runs.csv").exists());
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(out.join("reports.ndjson")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["outcome"], "complete");
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(pilotsim(&["--config", missing.to_str().unwrap(), "--out", out]).status.code(), Some(1));

    let bad_preset = write(tmp.path(), "w9.json", &SMALL_MATRIX.replace(r#"[{"kind": "chain", "n": 6, "file_size": 200000000}]"#, r#"["W9"]"#));
    assert_eq!(pilotsim(&["--config", &bad_preset, "--out", out, "--seeds", "1"]).status.code(), Some(1));

    let bad_se = write(tmp.path(), "se.json", &SMALL_MATRIX.replace("d3f3", "d4f1"));
    assert_eq!(pilotsim(&["--config", &bad_se, "--out", out, "--seeds", "1"]).status.code(), Some(1));

    let cfg = write(tmp.path(), "m.json", SMALL_MATRIX);
    // No seeds anywhere.
    assert_eq!(pilotsim(&["--config", &cfg, "--out", out]).status.code(), Some(1));
    assert_eq!(pilotsim(&["--config", &cfg, "--out", out, "--seeds", "0"]).status.code(), Some(1));
    assert_eq!(pilotsim(&["--config", &cfg, "--out", out, "--seeds", "1", "--emit", "xml"]).status.code(), Some(1));

    let blocker = write(tmp.path(), "file", "x");
    let o = pilotsim(&["--config", &cfg, "--out", &format!("{blocker}/sub"), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn strict_turns_degraded_runs_into_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "f.json",
        r#"{"workflow":{"kind":"chain","n":2,"file_size":100000000},"site":{"n_workers":1,"slots_per_worker":2},
            "se_condition":{"delay_factor":0.01,"failure_rate":1.0},"cache_scheme":"C1","submission_mode":"prerun(2)",
            "jobs":{"max_retries":1},"seed":5}"#,
    );
    let out = tmp.path().join("out");
    let o = pilotsim(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let o = pilotsim(&["--config", &cfg, "--out", out.to_str().unwrap(), "--strict"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(fs::read_to_string(out.join("runs.csv")).unwrap().contains("incomplete"));
}
