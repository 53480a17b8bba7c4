mod common;

use std::fs;

use common::{bict, write_tiny};
use serde_json::Value;

fn stderr_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("error JSON on stderr")
}

#[test]
fn unknown_config_key_fails_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "data.num_classes = 8\ndata.bogus = 1\n").unwrap();
    let out = bict(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("data.bogus"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn run_rejects_sweep_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    fs::write(&cfg, "run.scenario = lambda-sweep\n").unwrap();
    let out = bict(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["kind"], "config");
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let o = dir.path().join("o");
    let o = o.to_str().unwrap();
    assert!(bict(&["gen-data", "--config", &cfg, "--out", o])
        .status
        .success());
    let again = bict(&["gen-data", "--config", &cfg, "--out", o]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(stderr_json(&again)["kind"], "exists");
    assert!(bict(&["gen-data", "--config", &cfg, "--out", o, "--force"])
        .status
        .success());
}

#[test]
fn gen_data_is_reproducible_and_described() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let out = bict(&[
            "gen-data",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            o.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["status"], "ok");
    }
    for name in [
        "seed7/train.bin",
        "seed7/queries.bin",
        "seed7/gallery.bin",
        "manifest.json",
        "checksums.txt",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let ds = &manifest["datasets"][0];
    assert_eq!(ds["dataset"]["seed"], 7);
    assert_eq!(ds["dataset"]["num_samples"], 96);
    assert_eq!(ds["gallery_size"], 24);
    assert_eq!(ds["num_queries"], 16);
    let snapshot = fs::read_to_string(a.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("run.seeds = 7"));
}

#[test]
fn hot_refresh_curves_start_at_old_and_end_fully_backfilled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let o = dir.path().join("o");
    let out = bict(&[
        "hot-refresh",
        "--config",
        &cfg,
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut rdr = csv::Reader::from_path(o.join("refresh.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    // 2 seeds x 2 orders x (old row + 3 fractions)
    assert_eq!(rows.len(), 16);
    for curve in rows.chunks(4) {
        assert_eq!(&curve[0][2], "-1");
        assert_eq!(&curve[1][3], "0");
        assert_eq!(&curve[3][3], "24");
    }
}

#[test]
fn run_writes_reports_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let o = dir.path().join("o");
    let out = bict(&[
        "run",
        "--config",
        &cfg,
        "--jobs",
        "2",
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = fs::read_to_string(o.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "seed,M_o2o,M_BCT,M_FCT,M_n2n_oracle");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("median,"));
    for f in [
        "logs/seed1_old.csv",
        "logs/seed2_psi.csv",
        "checkpoints/seed1_gen1.json",
        "checkpoints/seed2_gen0.bin",
    ] {
        assert!(o.join(f).exists(), "{f}");
    }
    let checksums = fs::read_to_string(o.join("checksums.txt")).unwrap();
    assert!(checksums.lines().any(|l| l.ends_with("report.json")));
}
