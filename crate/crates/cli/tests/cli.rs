//! End-to-end tests of the `entflow` binary: exit codes, configuration
//! diagnostics, artifact layout, determinism, and the export formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use entflow_cli::checks::REGISTRY;
use serde_json::Value;
use tempfile::TempDir;

fn entflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_entflow"))
}

/// Path of a scenario bundled with the repository.
fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn write_scenario(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("write scenario");
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn report_at(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report.json exists");
    serde_json::from_str(&text).expect("report.json parses")
}

/// A small valid scenario body; callers append check tables.
fn tiny_scenario(name: &str, n: usize, checks: &str) -> String {
    format!(
        r#"
name = "{name}"
dimension = 1
n = {n}
dt = 1e-3
horizon = 0.05
seed = 7
output = "out/{name}"

[potential]
kind = "quadratic"
kappa = 1.0

[initial]
mean = [1.0]
variance = 0.25

[grid]
lo = [-6.0]
hi = [6.0]
cells = [128]

{checks}
"#
    )
}

#[test]
fn list_checks_prints_the_sorted_registry() {
    let out = entflow().arg("list-checks").output().expect("spawn");
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).expect("utf-8");
    let entries: Vec<&str> = stdout
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with(' '))
        .collect();
    assert_eq!(entries.len(), REGISTRY.len(), "one line per registered check");
    let names: Vec<&str> = entries
        .iter()
        .map(|l| l.split_whitespace().next().expect("name column"))
        .collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    assert_eq!(names, sorted, "checks are listed in sorted order");
    assert!(names.contains(&"de_bruijn"));
    // Every entry carries an indented identity line.
    let identities =
        stdout.lines().filter(|l| l.starts_with("    identity: ")).count();
    assert_eq!(identities, REGISTRY.len());
}

#[test]
fn every_bundled_scenario_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).expect("scenarios directory") {
        let path = entry.expect("dir entry").path();
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            entflow_cli::config::load(&path)
                .unwrap_or_else(|e| panic!("{} should validate: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 13, "expected the full scenario bundle, found {seen}");
}

#[test]
fn smoke_run_passes_and_writes_artifacts() {
    let tmp = TempDir::new().expect("tempdir");
    let out = entflow()
        .arg("run")
        .arg(bundled("ou_smoke.toml"))
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    for artifact in ["report.json", "entropy.csv", "entropy.json", "density_final.csv"] {
        assert!(tmp.path().join(artifact).exists(), "missing {artifact}");
    }
    let report = report_at(tmp.path());
    assert_eq!(report["scenario"], "ou_smoke");
    assert_eq!(report["seed"], 1012);
    let checks = report["checks"].as_array().expect("checks array");
    assert_eq!(checks.len(), 6);
    assert!(checks.iter().all(|c| c["pass"] == true));
    // Timings cover exactly the executed checks.
    let timings = report["timings"].as_object().expect("timings map");
    assert_eq!(timings.len(), checks.len());
}

#[test]
fn transient_run_confirms_the_entropy_slope() {
    let tmp = TempDir::new().expect("tempdir");
    let out = entflow()
        .arg("run")
        .arg(bundled("ou_debruijn.toml"))
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report = report_at(tmp.path());
    let checks = report["checks"].as_array().expect("checks array");
    let db = checks.iter().find(|c| c["name"] == "de_bruijn").expect("de_bruijn ran");
    assert_eq!(db["pass"], true);
}

#[test]
fn output_directory_comes_from_the_config_when_the_env_is_unset() {
    let tmp = TempDir::new().expect("tempdir");
    let out = entflow()
        .arg("run")
        .arg(bundled("ou_smoke.toml"))
        .current_dir(tmp.path())
        .env_remove("ENTFLOW_OUTPUT_DIR")
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(tmp.path().join("out/ou_smoke/report.json").exists());
}

#[test]
fn reports_are_deterministic_for_a_fixed_seed() {
    let run = |dir: &Path| {
        let out = entflow()
            .arg("run")
            .arg(bundled("ou_smoke.toml"))
            .env("ENTFLOW_OUTPUT_DIR", dir)
            .output()
            .expect("spawn");
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    };
    let (a, b) = (TempDir::new().expect("tempdir"), TempDir::new().expect("tempdir"));
    run(a.path());
    run(b.path());

    // The reports must agree byte for byte once the wall-clock fields are
    // masked: the generation timestamp and the per-check timing values
    // (their key set still has to match).
    let normalize = |dir: &Path| {
        let mut v = report_at(dir);
        v["generated_at_unix"] = Value::from(0.0);
        let timings = v["timings"].as_object_mut().expect("timings map");
        let keys: Vec<String> = timings.keys().cloned().collect();
        for k in keys {
            timings[&k] = Value::from(0.0);
        }
        serde_json::to_string_pretty(&v).expect("serialize")
    };
    assert_eq!(normalize(a.path()), normalize(b.path()));

    // CSV artifacts carry no timestamps at all.
    let csv = |dir: &Path, file: &str| std::fs::read(dir.join(file)).expect("artifact");
    assert_eq!(csv(a.path(), "entropy.csv"), csv(b.path(), "entropy.csv"));
    assert_eq!(csv(a.path(), "density_final.csv"), csv(b.path(), "density_final.csv"));
}

#[test]
fn failing_check_exits_one_and_still_reports() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_scenario(
        tmp.path(),
        "tight.toml",
        &tiny_scenario(
            "tight",
            100,
            "[[check]]\nname = \"de_bruijn\"\ntolerance = 1e-12\n",
        ),
    );
    let out = entflow()
        .arg("run")
        .arg(&cfg)
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(1));
    let report = report_at(tmp.path());
    assert_eq!(report["checks"][0]["pass"], false);
}

#[test]
fn dt_beyond_horizon_is_a_configuration_error() {
    let tmp = TempDir::new().expect("tempdir");
    let body = tiny_scenario("bad_dt", 100, "[[check]]\nname = \"de_bruijn\"\n")
        .replace("dt = 1e-3", "dt = 0.2");
    let cfg = write_scenario(tmp.path(), "bad_dt.toml", &body);
    let out = entflow().arg("run").arg(&cfg).output().expect("spawn");
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("exceeds the horizon"), "diagnostic names the field: {err}");
    assert!(err.contains("dt"), "diagnostic names the field: {err}");
}

#[test]
fn unknown_keys_are_rejected_with_position() {
    let tmp = TempDir::new().expect("tempdir");
    let body = format!(
        "{}\nunexpected_knob = 3\n",
        tiny_scenario("stray", 100, "[[check]]\nname = \"de_bruijn\"\n")
    );
    let cfg = write_scenario(tmp.path(), "stray.toml", &body);
    let out = entflow().arg("run").arg(&cfg).output().expect("spawn");
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("unexpected_knob"), "{err}");
    assert!(err.contains("line"), "diagnostic carries a position: {err}");
}

#[test]
fn starved_ensemble_exits_three() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_scenario(
        tmp.path(),
        "starved.toml",
        &tiny_scenario("starved", 10, "[[check]]\nname = \"martingale\"\n"),
    );
    let out = entflow()
        .arg("run")
        .arg(&cfg)
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr_of(&out).contains("insufficient sample"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn check_subcommand_runs_only_the_selected_names() {
    let tmp = TempDir::new().expect("tempdir");
    let out = entflow()
        .arg("check")
        .arg(bundled("ou_smoke.toml"))
        .args(["--only", "displacement_identity"])
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report = report_at(tmp.path());
    let checks = report["checks"].as_array().expect("checks array");
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "displacement_identity");
}

#[test]
fn check_subcommand_rejects_names_outside_the_scenario() {
    // `hwi` is a registered check, but ou_smoke does not select it.
    let out = entflow()
        .arg("check")
        .arg(bundled("ou_smoke.toml"))
        .args(["--only", "hwi"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("hwi"));
}

#[test]
fn export_renders_csv_and_json_views_of_a_report() {
    let tmp = TempDir::new().expect("tempdir");
    let out = entflow()
        .arg("run")
        .arg(bundled("ou_smoke.toml"))
        .env("ENTFLOW_OUTPUT_DIR", tmp.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report_path = tmp.path().join("report.json");

    let csv = entflow()
        .args(["export", "--format", "csv"])
        .arg(&report_path)
        .output()
        .expect("spawn");
    assert_eq!(csv.status.code(), Some(0));
    let text = String::from_utf8(csv.stdout).expect("utf-8");
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("name,anchor,lhs,rhs,abs_gap,rel_gap,tolerance,gap_kind,pass")
    );
    assert_eq!(lines.count(), 6, "one row per check");

    let json = entflow()
        .args(["export", "--format", "json"])
        .arg(&report_path)
        .output()
        .expect("spawn");
    assert_eq!(json.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&json.stdout).expect("json parses");
    assert_eq!(v["checks"].as_array().expect("checks").len(), 6);
}

#[test]
fn export_of_a_missing_report_is_a_configuration_error() {
    let out = entflow()
        .args(["export", "--format", "csv", "/nonexistent/report.json"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}
