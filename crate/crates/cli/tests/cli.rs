use std::path::Path;
use std::process::{Command, Output};

use fracmf_cli::config::RunConfig;
use fracmf_cli::report::blob_hash;
use serde_json::Value;

fn fracmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracmf")).args(args).env_remove("FRACMF_WORKERS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn operators_suite_passes_and_reports_measured_values() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = fracmf(&["validate", "--suite", "operators", "--H", "0.75", "--n", "1024", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["pass"], true);
    let checks = r["result"][0]["checks"].as_array().unwrap();
    let iso = checks.iter().find(|c| c["name"] == "isometry_rel_error").unwrap();
    assert!(iso["measured"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nn = \"many\"\n").unwrap();
    assert_eq!(code(&fracmf(&["validate", "--config", bad.to_str().unwrap()])), 2);
    std::fs::write(&bad, "[grid]\ncells = 4\n").unwrap();
    assert_eq!(code(&fracmf(&["validate", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&fracmf(&["validate", "--config", "/nonexistent/run.toml"])), 2);
    assert_eq!(code(&fracmf(&["greeks", "--payoff", "digital:1"])), 2);
    assert_eq!(code(&fracmf(&["greeks", "--H", "0.4", "--N", "10", "--n", "8"])), 2);
    assert_eq!(code(&fracmf(&["simulate", "--N", "1"])), 2);
    assert_eq!(code(&fracmf(&["validate", "--bogus-flag"])), 2);
}

#[test]
fn varswap_precondition_failure_exits_two() {
    // mu <= q x
    let out = fracmf(&["varswap", "--x", "0.5", "--mu", "0.5", "--q", "1", "--N", "10", "--n", "8"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mu > q x"));
}

#[test]
fn solver_non_convergence_exits_one() {
    let out = fracmf(&["greeks", "--N", "200", "--n", "16", "--tol", "1e-15", "--max-iter", "1"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn greeks_reports_are_byte_identical_on_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let args = ["greeks", "--model", "geometric", "--N", "2000", "--n", "32", "--seed", "11", "--workers", "2", "--output", report.to_str().unwrap()];
    assert_eq!(code(&fracmf(&args)), 0);
    let first = std::fs::read(&report).unwrap();
    assert_eq!(code(&fracmf(&args)), 0);
    assert_eq!(first, std::fs::read(&report).unwrap());

    let mut one = args.to_vec();
    one[10] = "1";
    assert_eq!(code(&fracmf(&one)), 0);
    let a: Value = serde_json::from_slice(&first).unwrap();
    let b = json(&report);
    for ptr in ["/result/bel/estimate/mean", "/result/fd/mean"] {
        let (x, y) = (a.pointer(ptr).unwrap().as_f64().unwrap(), b.pointer(ptr).unwrap().as_f64().unwrap());
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{ptr}: {x} vs {y}");
    }
}

#[test]
fn greeks_constant_payoff_is_zero_and_power_matches_fd() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let out = fracmf(&["greeks", "--model", "geometric", "--payoff", "constant:2", "--N", "4000", "--n", "32", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let r = json(&report);
    let est = &r["result"]["bel"]["estimate"];
    assert!(est["mean"].as_f64().unwrap().abs() <= 3.0 * est["stderr"].as_f64().unwrap());
    assert_eq!(r["result"]["fd"]["mean"].as_f64().unwrap(), 0.0);

    let out = fracmf(&["greeks", "--model", "geometric", "--payoff", "power:2", "--N", "20000", "--n", "64", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&report)["result"]["ci_overlap"], true);
}

#[test]
fn dumped_config_round_trips_and_hash_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = fracmf(&["greeks", "--model", "affine", "--H", "0.8", "--payoff", "smooth-call:1.1:0.05", "--time", "0.5", "--workers", "1", "--dump-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.to_toml().unwrap(), text);
    assert_eq!(cfg.model.hurst(), 0.8);

    let file = dir.path().join("run.toml");
    std::fs::write(&file, &text).unwrap();
    let again = fracmf(&["greeks", "--config", file.to_str().unwrap(), "--dump-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    let report = dir.path().join("s.json");
    let out = fracmf(&["simulate", "--N", "50", "--n", "8", "--workers", "1", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let r = json(&report);
    let embedded = fracmf(&["simulate", "--N", "50", "--n", "8", "--workers", "1", "--output", report.to_str().unwrap(), "--dump-config"]);
    assert_eq!(r["input_hash"].as_str().unwrap(), blob_hash(&embedded.stdout));
    assert_eq!(r["seed"], 7);
    assert!(r["rng"].as_str().unwrap().contains("ChaCha8"));
}

#[test]
fn simulate_writes_commented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("paths.csv");
    let out = fracmf(&["simulate", "--N", "40", "--n", "16", "--csv", csv.to_str().unwrap(), "--output", dir.path().join("r.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with('#'));
    let header = lines.iter().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("t,rho,gamma,path_0"));
    assert_eq!(lines.iter().filter(|l| !l.starts_with('#')).count(), 18);
}

#[test]
fn varswap_with_zero_feedback_is_noted() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v.json");
    let out = fracmf(&["varswap", "--q", "0", "--N", "500", "--n", "32", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    let notes = r["result"]["notes"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().starts_with("q = 0")));
    for p in r["result"]["points"].as_array().unwrap() {
        assert_eq!(p["feedback_term"]["mean"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn default_varswap_report_has_four_terms() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v.json");
    let out = fracmf(&["varswap", "--N", "500", "--n", "32", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let r = json(&report);
    let p = &r["result"]["points"].as_array().unwrap()[3];
    for k in ["density_term", "feedback_term", "pairing_term", "initial_term", "total"] {
        assert!(p[k]["mean"].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(r["result"]["theta_residual"].as_f64().unwrap() <= 1e-4);
}
