use std::path::Path;

use mfg_moments::cli::{execute, EXIT_COMPARE_FAIL, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use mfg_moments::io::{sha256_hex, CsvTable};
use mfg_moments::moments::{closed_form_moments_const, MomentInit, MomentTable};
use mfg_moments::recover::ObservedSeries;
use serde_json::Value;

const BROWNIAN: &str = r#"{"T": 1, "delta": 1, "lambda": 0,
    "cost": {"a": -1, "b": 0.3, "c": 0},
    "terminal": {"A_T": -0.25, "B_T": 0.2, "C_T": 0},
    "initial": {"kind": "gaussian", "x0": 0.5, "v0": 0.2}}"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["mfg-moments"];
    argv.extend_from_slice(args);
    execute(argv)
}

fn write_scenario(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&read(dir, "manifest.json")).unwrap()
}

#[test]
fn solve_writes_tables_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "s.json", BROWNIAN);
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["solve", "--scenario", &s, "--out", out_s, "--grid", "1024"]), EXIT_OK);

    let moments = MomentTable::from_table(&CsvTable::parse(&read(&out, "moments.csv")).unwrap()).unwrap();
    assert_eq!(moments.times.len(), 1025);
    assert_eq!(moments.focal, Some(false));
    let hjb = CsvTable::parse(&read(&out, "hjb.csv")).unwrap();
    assert_eq!(hjb.rows.len(), 1025);

    let m = manifest(&out);
    assert_eq!(m["command"], "solve");
    assert_eq!(m["parameters"]["grid"], 1024);
    assert_eq!(m["scenario"]["T"], 1.0);
    for entry in m["outputs"].as_array().unwrap() {
        let name = entry["file"].as_str().unwrap();
        assert_eq!(entry["sha256"], sha256_hex(read(&out, name).as_bytes()));
    }
}

#[test]
fn repeated_solve_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "s.json", BROWNIAN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["solve", "--scenario", &s, "--out", a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(run(&["solve", "--scenario", &s, "--out", b.to_str().unwrap()]), EXIT_OK);
    for name in ["hjb.csv", "moments.csv", "manifest.json"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
}

#[test]
fn density_files_named_by_time() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "s.json", BROWNIAN);
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["density", "--scenario", &s, "--times", "0.5,1", "--xgrid", "1024", "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    for name in ["density_t0.500000.csv", "density_t1.000000.csv"] {
        let table = CsvTable::parse(&read(&out, name)).unwrap();
        assert_eq!(table.header, ["x", "m"]);
        assert_eq!(table.rows.len(), 1024);
        let mass: f64 = table.meta("mass").unwrap().parse().unwrap();
        assert!((mass - 1.0).abs() < 1e-6);
    }
}

#[test]
fn simulate_without_times_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "s.json", BROWNIAN);
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["simulate", "--scenario", &s, "--paths", "1000", "--dt", "0.01", "--seed", "3", "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    let table = CsvTable::parse(&read(&out, "simulated_moments.csv")).unwrap();
    assert!(table.rows.is_empty());
    assert_eq!(table.header[0], "t");
    assert_eq!(manifest(&out)["parameters"]["seed"], 3);
}

#[test]
fn simulate_with_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let s = write_scenario(tmp.path(), "s.json", BROWNIAN);
    let out = tmp.path().join("out");
    let code = run(&[
        "simulate", "--scenario", &s, "--paths", "1000", "--dt", "0.01", "--seed", "3", "--times", "0.5,1",
        "--endpoints", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let sim = CsvTable::parse(&read(&out, "simulated_moments.csv")).unwrap();
    assert_eq!(sim.rows.len(), 2);
    let ends = CsvTable::parse(&read(&out, "endpoints.csv")).unwrap();
    assert_eq!(ends.rows.len(), 2000);
}

#[test]
fn recover_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let f = closed_form_moments_const(1.0, 0.5, 0.8, MomentInit { e0: 1.0, de0: 0.5, v0: 0.4, dv0: 1.0 }).unwrap();
    let times: Vec<f64> = (0..50).map(|i| 0.6 * i as f64 / 49.0).collect();
    let series = ObservedSeries::scalar(
        times.clone(),
        times.iter().map(|&t| f.mean(t)).collect(),
        Some(times.iter().map(|&t| f.variance(t).unwrap()).collect()),
    )
    .unwrap();
    let input = tmp.path().join("series.csv");
    std::fs::write(&input, series.to_table().render()).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["recover", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    let p: Value = serde_json::from_str(&read(&out, "recovered.json")).unwrap();
    assert_eq!(p["branch"], "oscillatory");
    assert!((p["a"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!((p["b"][0].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert!((p["K"].as_f64().unwrap() - 0.8).abs() < 1e-6);
    let residuals = CsvTable::parse(&read(&out, "fit_residuals.csv")).unwrap();
    assert_eq!(residuals.rows.len(), 50);
    assert_eq!(manifest(&out)["input_sha256"], sha256_hex(std::fs::read(&input).unwrap().as_slice()));

    let forced = tmp.path().join("forced");
    assert_eq!(
        run(&["recover", "--input", input.to_str().unwrap(), "--out", forced.to_str().unwrap(), "--branch", "poly"]),
        EXIT_OK
    );
    let q: Value = serde_json::from_str(&read(&forced, "recovered.json")).unwrap();
    assert_eq!(q["branch"], "polynomial");
    assert_eq!(
        run(&["recover", "--input", input.to_str().unwrap(), "--out", forced.to_str().unwrap(), "--branch", "spline"]),
        EXIT_VALIDATION
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let good = write_scenario(tmp.path(), "good.json", BROWNIAN);
    assert_eq!(run(&["validate", "--scenario", &good]), EXIT_OK);

    let bad = write_scenario(tmp.path(), "bad.json", r#"{"T": -1, "delta": 1}"#);
    assert_eq!(run(&["validate", "--scenario", &bad]), EXIT_VALIDATION);
    assert_eq!(run(&["solve", "--scenario", &bad, "--out", out_s]), EXIT_VALIDATION);

    assert_eq!(run(&["solve", "--scenario", &good, "--out", out_s, "--frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["solve", "--scenario", &good]), EXIT_USAGE);

    // The linearizer vanishes at t = 0.5.
    let singular = write_scenario(
        tmp.path(),
        "singular.json",
        r#"{"T": 1, "delta": 1, "lambda": 0, "cost": {"a": 0, "b": 0, "c": 0},
            "terminal": {"A_T": 1, "B_T": 0, "C_T": 0}, "initial": {"kind": "dirac", "x0": 0}}"#,
    );
    assert_eq!(run(&["solve", "--scenario", &singular, "--out", out_s]), EXIT_OK);
    let moments = MomentTable::from_table(&CsvTable::parse(&read(&out, "moments.csv")).unwrap()).unwrap();
    assert_eq!(moments.focal, Some(true));
    let code = run(&["simulate", "--scenario", &singular, "--paths", "1000", "--dt", "0.01", "--times", "1", "--out", out_s]);
    assert_eq!(code, EXIT_NUMERICAL);
    assert_eq!(run(&["density", "--scenario", &singular, "--times", "0.75", "--out", out_s]), EXIT_NUMERICAL);

    // Noise-free paths make every standard error zero, so the Euler bias is an exact mismatch.
    let deterministic = write_scenario(
        tmp.path(),
        "deterministic.json",
        r#"{"T": 1, "delta": 0, "lambda": 0, "cost": {"a": -2, "b": 0, "c": 0},
            "terminal": {"A_T": 1, "B_T": 0, "C_T": 0}, "initial": {"kind": "dirac", "x0": 1}}"#,
    );
    let code = run(&[
        "compare", "--scenario", &deterministic, "--paths", "1000", "--dt", "0.01", "--out", out_s,
    ]);
    assert_eq!(code, EXIT_COMPARE_FAIL);
    let report: Value = serde_json::from_str(&read(&out, "report.json")).unwrap();
    assert_eq!(report["pass"], false);
}
