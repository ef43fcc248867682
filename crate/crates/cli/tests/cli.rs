use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn besselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_besselab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn list_prints_every_experiment() {
    let out = besselab(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().collect();
    assert_eq!(names, besselab::experiments::NAMES);
}

#[test]
fn shipped_configs_validate() {
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let p = entry.unwrap().path();
        let out = besselab(&["validate", "--config", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
        let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(resolved.is_object());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "a.json", r#"{"experiment": "no-such-thing"}"#);
    let bad_param = write_config(
        dir.path(),
        "b.json",
        r#"{"experiment": "kernel-bounds", "params": {"lambdas": [-1.0]}}"#,
    );
    let bad_field = write_config(
        dir.path(),
        "c.json",
        r#"{"experiment": "kernel-bounds", "params": {"lambda": 1.0}}"#,
    );
    let not_json = write_config(dir.path(), "d.json", "{");
    for p in [&unknown, &bad_param, &bad_field, &not_json] {
        let out = besselab(&["validate", "--config", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{}", p.display());
        let out = besselab(&["run", "--config", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{}", p.display());
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(besselab(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(besselab(&["frobnicate"]).status.code(), Some(2));

    // The indicator transform at distance 2^-40 from the edge does not converge.
    let numeric = write_config(
        dir.path(),
        "e.json",
        r#"{"experiment": "proper-subspace", "params": {"delta_exponents": [38, 40]}}"#,
    );
    let out = besselab(&["run", "--config", numeric.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // The output directory cannot be created under a regular file.
    let blocker = write_config(dir.path(), "file", "");
    let ok = configs_dir().join("kernel-bounds-lambda1.json");
    let out = besselab(&[
        "run",
        "--config",
        ok.to_str().unwrap(),
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn same_seed_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("kernel-bounds-lambda1.json");
    let mut reports = Vec::new();
    for (k, seed) in ["5", "5", "6"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{k}"));
        let out = besselab(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for ext in ["json", "series.csv", "scalars.csv", "timing.json"] {
            assert!(out_dir.join(format!("kernel-bounds-lambda1.{ext}")).exists());
        }
        reports.push(std::fs::read(out_dir.join("kernel-bounds-lambda1.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let a: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    let c: serde_json::Value = serde_json::from_slice(&reports[2]).unwrap();
    assert_eq!(a["metadata"]["seed"], 5);
    assert_eq!(c["metadata"]["seed"], 6);
    assert_ne!(a["metadata"]["config_hash"], c["metadata"]["config_hash"]);
    assert_eq!(a["metadata"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn strict_flag_reports_failed_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tight.json",
        r#"{"experiment": "kernel-bounds", "params": {"lambdas": [1.0], "exponent_tol": 1e-9}}"#,
    );
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    assert_eq!(besselab(&args).status.code(), Some(0));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(besselab(&strict).status.code(), Some(5));
}
