use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repp")).args(args).output().expect("binary runs")
}

fn asset(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel).display().to_string()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(asset("configs/smoke.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn smoke_config_emits_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = repp(&["repp", "--config", &asset("configs/smoke.json"), "--out", out.to_str().unwrap(), "--threads", "2"]);
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 1, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["events.csv", "counts.csv", "tails.csv", "results.jsonl", "summary.md"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let events = std::fs::read_to_string(out.join("events.csv")).unwrap();
    assert!(events.starts_with("run_id,seed,raw_time,rescaled_time\n"));
    assert!(events.lines().count() > 100);
    let counts = std::fs::read_to_string(out.join("counts.csv")).unwrap();
    assert!(counts.starts_with("cell,system,n,tau,t,k,observed_fraction,poisson_pmf\n"));
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    let ops: Vec<String> = results
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["op"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ops.iter().filter(|o| *o == "poisson_count_test").count(), 3);
    assert_eq!(ops.iter().filter(|o| *o == "ks_exponential").count(), 1);
    let summary = std::fs::read_to_string(out.join("summary.md")).unwrap();
    assert!(summary.contains("## Verdict"));
}

#[test]
fn zero_realizations_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| v["realizations_per_cell"] = 0.into());
    let o = repp(&["repp", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("realizations_per_cell"));
}

#[test]
fn missing_and_malformed_configs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(repp(&["simulate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(repp(&["stats", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(repp(&["repp"]).status.code(), Some(2));
}

#[test]
fn induce_needs_induced_mode() {
    let o = repp(&["induce", "--config", &asset("configs/smoke.json")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn table_validate_accepts_shipped_tables_and_rejects_bad_ones() {
    for t in ["tables/two_disk.json", "tables/finite_horizon.json", "tables/stadium.json"] {
        let o = repp(&["table", "validate", &asset(t)]);
        assert_eq!(o.status.code(), Some(0), "{t}");
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("valid"));
    }
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("t.json");
    std::fs::write(&bad, r#"{"kind": "lorentz", "scatterers": [{"cx": 0.5, "cy": 0.5, "radius": 0.6}]}"#).unwrap();
    assert_eq!(repp(&["table", "validate", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"kind": "stadium", "a": -1.0, "R": 1.0}"#).unwrap();
    assert_eq!(repp(&["table", "validate", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn published_schema_matches_the_config_type() {
    let o = repp(&["schema"]);
    assert_eq!(o.status.code(), Some(0));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let published: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(asset("schema/experiment_config.schema.json")).unwrap()).unwrap();
    assert_eq!(printed, published);
}

#[test]
fn shipped_configs_validate() {
    for c in ["configs/smoke.json", "configs/finite_horizon.json", "configs/stadium_induced.json", "configs/diagnostics.json"] {
        let text = std::fs::read_to_string(asset(c)).unwrap();
        repp_harness::config::ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{c}: {e}"));
    }
}

#[test]
fn simulate_skips_tests_and_stats_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| {
        v["realizations_per_cell"] = 50.into();
        v["diagnostics"] = serde_json::json!({
            "annulus": {"cases": 2, "eps_min": 1e-4, "eps_max": 1e-2, "samples": 2000},
            "short_returns": {"k_values": [100], "samples": 50, "seeds": 2}
        });
    });
    let out = dir.path().join("sim");
    let o = repp(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out.join("results.jsonl")).unwrap().is_empty());
    let out = dir.path().join("stats");
    let o = repp(&["stats", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.matches("\"op\":\"annulus_measure_check\"").count(), 2);
    assert_eq!(results.matches("\"op\":\"short_return_fraction\"").count(), 2);
}

#[test]
fn reduced_acceptance_selection_prints_one_line_per_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let o = repp(&["accept", "--scale", "reduced", "--only", "1,2,4", "--out", dir.path().to_str().unwrap(), "--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion")).count(), 3);
    assert!(dir.path().join("results.jsonl").is_file());
    assert_eq!(repp(&["accept", "--only", "12"]).status.code(), Some(2));
}
