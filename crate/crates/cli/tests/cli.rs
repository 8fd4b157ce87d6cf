//! End-to-end runs of the `wfr` binary against the shipped fixtures and
//! schemas.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture(name: &str) -> PathBuf {
    crate_dir().join("tests/fixtures").join(name)
}

fn wfr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wfr"));
    cmd.args(args);
    for var in ["WFR_CONFIG", "WFR_OUT", "WFR_THREADS", "WFR_SEED"] {
        cmd.env_remove(var);
    }
    cmd.envs(envs.iter().copied());
    cmd.output().expect("binary runs")
}

fn run_ok(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = wfr(&args, &[]);
    assert!(
        o.status.success(),
        "{sub} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn schema_for(file: &str) -> Option<&'static str> {
    Some(match file {
        "provenance.json" => "provenance",
        "dist.json" => "dist",
        "energy.json" => "energy",
        "ensemble.json" => "ensemble",
        "simulate.json" => "simulate",
        "grid.json" => "field_header",
        "lift.json" => "lift",
        "solve.json" => "solve",
        "observations.json" => "observations",
        "extremality.json" => "extremality",
        _ => return None,
    })
}

fn assert_valid(schema: &str, instance: &Value) {
    let schema_path = crate_dir().join("schemas").join(format!("{schema}.schema.json"));
    let compiled = jsonschema::JSONSchema::compile(&read_json(&schema_path)).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(instance) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{schema} schema violations: {msgs:?}");
}

/// Every JSON file in the output directory validates against its schema,
/// and the provenance lists every file the run wrote.
fn assert_outputs_valid(out: &Path) {
    let prov = read_json(&out.join("provenance.json"));
    assert_valid("provenance", &prov);
    assert_valid("config", &prov["config"]);
    let listed: Vec<&str> = prov["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for entry in fs::read_dir(out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "provenance.json" {
            assert!(listed.contains(&name.as_str()), "{name} missing from provenance outputs");
        }
        if name.ends_with(".json") {
            let schema = schema_for(&name).unwrap_or_else(|| panic!("no schema for {name}"));
            assert_valid(schema, &read_json(&out.join(&name)));
        }
    }
}

/// Output files except the provenance, which holds the timestamps.
fn deterministic_outputs(out: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "provenance.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn energy_of_stationary_atom_prints_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("energy");
    let stdout = run_ok("energy", &fixture("energy.json"), &out, &[]);
    assert_eq!(stdout, "2.0\n");
    let report = read_json(&out.join("energy.json"));
    assert_eq!(report["energy"], json!(2.0));
    assert_eq!(report["coercivity"]["holds"], json!(true));
    assert_outputs_valid(&out);
}

#[test]
fn check_extremal_accepts_normalized_stationary_atom() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "check.json",
        &json!({"inputs": {"curve": fixture("stationary.csv")}}),
    );
    let out = tmp.path().join("check");
    assert_eq!(run_ok("check-extremal", &config, &out, &[]), "true\n");
    let report = read_json(&out.join("extremality.json"));
    assert_eq!(report["energy_before"], json!(2.0));
    assert_eq!(report["report"]["components"], json!(1));
    assert!(out.join("unit_curve.csv").exists());
    assert_outputs_valid(&out);
}

#[test]
fn dist_reports_closed_form_flat_distance() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "dist.json",
        &json!({"dist": {"a": {"mass": 2.0, "position": [0.0, 0.0]}, "b": {"mass": 0.5, "position": [0.3, 0.4]}}}),
    );
    let out = tmp.path().join("dist");
    let stdout = run_ok("dist", &config, &out, &[]);
    // |2 − 0.5| + 0.5·0.5
    let value: f64 = stdout.trim().parse().unwrap();
    assert!((value - 1.75).abs() < 1e-15);
    assert_outputs_valid(&out);
}

#[test]
fn validation_errors_exit_one_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.json", &json!({"energy": {"alpha": 1, "beta": 1, "delta": -1}}));
    let out = tmp.path().join("out");
    let o = wfr(&["energy", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_valid("error", &err);
    assert_eq!(err["error"]["kind"], json!("range"));
    assert_eq!(err["error"]["field"], json!("energy.delta"));

    let typo = write_config(tmp.path(), "typo.json", &json!({"lift": {"epsilon": "small"}}));
    let o = wfr(&["lift", "--config", typo.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], json!("schema"));
    assert_eq!(err["error"]["field"], json!("lift.epsilon"));

    let o = wfr(&["energy", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], json!("missing_input"));
    let prov = read_json(&out.join("provenance.json"));
    assert_valid("provenance", &prov);
    assert_eq!(prov["error"]["error"]["kind"], json!("missing_input"));
}

#[test]
fn unwritable_output_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = wfr(&["energy", "--out", blocker.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_valid("error", &err);
    assert_eq!(err["error"]["kind"], json!("io"));
}

#[test]
fn environment_overrides_seed_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env");
    let o = wfr(
        &["simulate"],
        &[("WFR_OUT", out.to_str().unwrap()), ("WFR_SEED", "41"), ("WFR_THREADS", "2")],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let prov = read_json(&out.join("provenance.json"));
    assert_eq!(prov["seed"], json!(41));
    assert_eq!(prov["config"]["seed"], json!(41));
    assert_eq!(prov["threads"], json!(2));
    assert_outputs_valid(&out);

    let other = tmp.path().join("env2");
    let o = wfr(&["simulate", "--seed", "42"], &[("WFR_OUT", other.to_str().unwrap()), ("WFR_SEED", "41")]);
    assert!(o.status.success());
    assert_eq!(read_json(&other.join("provenance.json"))["seed"], json!(42));
    assert_ne!(
        fs::read(out.join("ensemble.json")).unwrap(),
        fs::read(other.join("ensemble.json")).unwrap()
    );
}

#[test]
fn simulate_then_lift_satisfies_mass_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let sim_cfg = write_config(
        tmp.path(),
        "simulate.json",
        &json!({
            "simulate": {
                "field": {"kind": "rotation", "cells": 16, "time_steps": 8, "angular_speed": 1.0, "growth": 0.0},
                "steps": 64,
                "starts": [{"position": [0.65, 0.5], "mass": 1.0}],
                "random_starts": 0,
                "raster": {"cells": 32, "time_steps": 32, "kernel_width": 0.09375}
            }
        }),
    );
    let sim = tmp.path().join("sim");
    run_ok("simulate", &sim_cfg, &sim, &[]);
    assert_outputs_valid(&sim);
    assert!(sim.join("grid.bin").exists());

    let lift_cfg = write_config(
        tmp.path(),
        "lift.json",
        &json!({
            "inputs": {"field": "sim/grid.json", "ensemble": "sim/ensemble.json"},
            "lift": {"epsilon": 2e-3, "samples_per_axis": 32}
        }),
    );
    let lifted = tmp.path().join("lift");
    run_ok("lift", &lift_cfg, &lifted, &[]);
    assert_outputs_valid(&lifted);
    let report = read_json(&lifted.join("lift.json"));
    assert_eq!(report["report"]["bound_satisfied"], json!(true));
    assert!(report["report"]["max_normalization_error"].as_f64().unwrap() <= 1e-10);
    let centroid = report["comparison"]["max_centroid_error"].as_f64().unwrap();
    assert!(centroid <= 2.0 / 32.0, "centroid error {centroid}");
    let mass = report["comparison"]["max_mass_error"].as_f64().unwrap();
    assert!(mass <= 1e-2, "mass error {mass}");
}

#[test]
fn solve_recovers_single_atom_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok("solve", &fixture("solve.json"), &a, &["--threads", "1"]);
    run_ok("solve", &fixture("solve.json"), &b, &["--threads", "4"]);
    assert_outputs_valid(&a);
    let report = read_json(&a.join("solve.json"));
    assert_eq!(report["data_source"], json!("synthetic"));
    assert!(report["relative_residual"].as_f64().unwrap() <= 1e-3);
    assert!(report["extremal"].as_array().unwrap().iter().all(|v| v == &json!(true)));
    let trace = report["objective_trace"].as_array().unwrap();
    assert!(trace.windows(2).all(|w| w[1].as_f64() <= w[0].as_f64()));
    assert_eq!(deterministic_outputs(&a), deterministic_outputs(&b));
    let csv = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), trace.len() + 1);
}
