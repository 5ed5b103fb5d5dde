//! The `coco` binary: exit codes, configuration handling, and output files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "seed": 3,
  "ranks": {"m_sy": [2]},
  "backtest": {"train_months": 12, "val_months": 1, "test_months": 1, "rolling_window": 6},
  "simulate": {
    "population": {"m": 3, "d": 3, "reference_rows": 100},
    "months": 24,
    "n_assets": 15,
    "asymptotics": {"t_list": [50, 100, 200], "reps": 4, "n_assets": 20},
    "asymptotics_rank": 2
  }
}"#;

fn coco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coco")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = coco(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    (dir, cfg)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(coco(&["--help"]).status.code(), Some(0));
    assert_eq!(coco(&["fit", "--help"]).status.code(), Some(0));
    assert_eq!(coco(&["--no-such-flag", "simulate"]).status.code(), Some(1));
    assert_eq!(coco(&["fit"]).status.code(), Some(1));
    assert_eq!(coco(&["--kernel", "spline", "simulate"]).status.code(), Some(1));
    assert_eq!(coco(&["fit", "/nonexistent/panel.csv"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,asset_id,ret,z_1\n2000-01,a,oops,1.0\n").unwrap();
    let out = coco(&["fit", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seeed": 1}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(coco(&["--config", s(&cfg), "--out", s(&out), "simulate"]).status.code(), Some(2));
}

#[test]
fn resolved_config_echoes_defaults_and_flags() {
    let (dir, cfg) = setup();
    let out = dir.path().join("sim");
    run_ok(&["--config", s(&cfg), "--out", s(&out), "--seed", "9", "simulate"]);
    let resolved: serde_json::Value = serde_json::from_str(&read(&out.join("config.resolved.json"))).unwrap();
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["simulate"]["months"], 24);
    // Untouched sections carry their defaults.
    assert_eq!(resolved["backtest"]["rho_multipliers"], serde_json::json!([0.25, 0.5, 1.0, 2.0, 4.0]));
    assert_eq!(resolved["kernel_sy"]["kind"], "cosine");
}

#[test]
fn simulate_backtest_fit_report_round() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let c = s(&cfg);
    let pipeline = || -> Vec<(String, Vec<u8>)> {
        let (sim, bt, fit, rep) = (root.join("sim"), root.join("bt"), root.join("fit"), root.join("rep"));
        run_ok(&["--config", c, "--out", s(&sim), "simulate"]);
        let panel = sim.join("panel.csv");
        let pop = sim.join("population.json");
        run_ok(&["--config", c, "--out", s(&bt), "backtest", s(&panel), "--population", s(&pop)]);
        run_ok(&["--config", c, "--out", s(&fit), "fit", s(&panel)]);
        run_ok(&["--config", c, "--out", s(&rep), "report", s(&bt)]);
        let mut files = Vec::new();
        for d in [&sim, &bt, &fit, &rep] {
            let mut names: Vec<PathBuf> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                if p.is_file() {
                    let rel = p.strip_prefix(d).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files
    };
    // Re-running into the same directories overwrites identical bytes.
    let first = pipeline();
    let second = pipeline();
    assert_eq!(first.len(), second.len());
    for ((na, a), (nb, b)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(a == b, "{na} differs between identical runs");
    }

    // Every CSV and JSON output names the configuration hash.
    let hash = {
        let fit: serde_json::Value = serde_json::from_str(&read(&root.join("fit/fit.json"))).unwrap();
        fit["config_sha256"].as_str().unwrap().to_string()
    };
    assert_eq!(hash.len(), 64);
    for (name, bytes) in &first {
        if name == "config.resolved.json" {
            continue;
        }
        let text = String::from_utf8_lossy(bytes);
        assert!(text.contains(&hash), "{name} lacks the config hash");
    }
    let report = read(&root.join("rep/report.csv"));
    assert!(report.lines().any(|l| l == "run,date,metric,window,value"));
    assert!(report.lines().any(|l| l.starts_with("bt,")));
}

#[test]
fn asymptotics_writes_table_and_verdict() {
    let (dir, cfg) = setup();
    let out = dir.path().join("rate");
    let o = run_ok(&["--config", s(&cfg), "--out", s(&out), "asymptotics"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS") || stdout.contains("FAIL"), "{stdout}");
    let table = read(&out.join("asymptotics.csv"));
    let mut rows = table.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(rows.next(), Some("T,rep,log_dev"));
    assert_eq!(rows.count(), 12);
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("asymptotics_summary.json"))).unwrap();
    assert!(summary["slope"].as_f64().unwrap().is_finite());
}

#[test]
fn short_panel_is_a_data_error() {
    let (dir, cfg) = setup();
    let sim = dir.path().join("sim");
    run_ok(&["--config", s(&cfg), "--out", s(&sim), "simulate"]);
    let out = dir.path().join("bt");
    let code = coco(&["--out", s(&out), "backtest", s(&sim.join("panel.csv"))]).status.code();
    // Default windows need 98 months; the simulated panel has 24.
    assert_eq!(code, Some(2));
}
