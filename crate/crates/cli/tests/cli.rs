use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eit_dipole::MeasurementSet;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eit-dipole"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn nums(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn forward_output_feeds_newton_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["forward", "--model", "ellipse"]);
    let data = dir.path().join("measurements.json");
    let m: MeasurementSet = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    assert_eq!(m.values.len(), 5);
    ok(dir.path(), &["newton", "--data", data.to_str().unwrap()]);
    let doc = read_json(dir.path().join("newton.json"));
    let e = &doc["result"]["ellipse"];
    for (key, want) in [("b1", 0.4), ("b2", 0.5), ("a1", 0.08), ("a2", 0.04), ("xi_deg", 45.0)] {
        assert!((e[key].as_f64().unwrap() - want).abs() < 1e-5 * want.max(1.0), "{key}: {}", e[key]);
    }
    assert_eq!(doc["result"]["trace"]["termination"], "converged");
}

#[test]
fn simplified_and_ellipse_differ_at_second_order_in_area() {
    let dir = tempfile::tempdir().unwrap();
    let gap = |scale: f64| {
        let cfg = format!(
            r#"{{"anomaly": {{"b1": 0.4, "b2": 0.5, "a1": {}, "a2": {}, "xi_deg": 45}}}}"#,
            0.08 * scale,
            0.04 * scale
        );
        let c = write_config(dir.path(), &cfg);
        ok(dir.path(), &["--config", c.to_str().unwrap(), "forward", "--model", "simplified", "ellipse"]);
        let doc = read_json(dir.path().join("forward.json"));
        let s = nums(&doc["result"]["models"]["simplified"]);
        let e = nums(&doc["result"]["models"]["ellipse"]);
        s.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let ratio = gap(1.0) / gap(0.5);
    assert!((ratio - 16.0).abs() < 1e-6, "halving the axes divides the gap by {ratio}");
}

#[test]
fn exact_route_matches_ellipse_map_at_reference_scale() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["forward", "--model", "ellipse", "--exact"]);
    let doc = read_json(dir.path().join("forward.json"));
    let e = nums(&doc["result"]["models"]["ellipse"]);
    let x = nums(&doc["result"]["exact"]);
    let worst = e.iter().zip(&x).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "largest relative gap {worst:.3e}");
}

#[test]
fn csv_uses_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--format", "csv", "forward", "--model", "simplified"]);
    let text = std::fs::read_to_string(dir.path().join("forward.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "phi_deg,simplified,data");
    for line in lines {
        for cell in line.split(',') {
            let mantissa = cell.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17, "{cell}");
            cell.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn field_grid_marks_exterior_absent() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), r#"{"field": {"phi_deg": 30, "resolution": 21}}"#);
    ok(dir.path(), &["--config", c.to_str().unwrap(), "--format", "csv", "field-grid"]);
    let text = std::fs::read_to_string(dir.path().join("field-grid.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 21 * 21);
    for r in &rows {
        let (x, y): (f64, f64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        assert_eq!(r[2].is_empty(), x * x + y * y >= 1.0, "{r:?}");
    }
    let summary = read_json(dir.path().join("field-grid.json"));
    let peak = nums(&summary["result"]["peak"]);
    assert!(peak[0] > 0.7 && peak[1] > 0.3, "{peak:?}");

    let c = write_config(dir.path(), r#"{"field": {"phi_deg": 30, "resolution": 8}}"#);
    assert_eq!(run(dir.path(), &["--config", c.to_str().unwrap(), "field-grid"]).status.code(), Some(2));
}

#[test]
fn oed_det_reports_the_known_optimum() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--format", "csv", "oed-det"]);
    let doc = read_json(dir.path().join("oed-det.json"));
    let best = &doc["result"]["argmax"];
    assert!((best["phi_deg"].as_f64().unwrap() - 37.0).abs() <= 360.0 / 64.0);
    assert!((best["psi_deg"].as_f64().unwrap() - 36.0).abs() <= 180.0 / 32.0);
    let text = std::fs::read_to_string(dir.path().join("oed-det.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "phi_deg,psi_deg,value,stderr");
    assert_eq!(text.lines().count(), 1 + 64 * 32);
}

#[test]
fn table2_medians_match_reference_locations() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "11", "table2"]);
    let doc = read_json(dir.path().join("table2.json"));
    let summary = doc["result"]["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 5);
    for s in summary {
        let s1 = nums(&s["median_step1"]);
        let s2 = nums(&s["median_step2"]);
        assert!((s1[0] - 0.4).abs() <= 0.02 && (s1[1] - 0.5).abs() <= 0.02, "{s1:?}");
        assert!((s2[0] - 0.4).abs() <= 0.02 && (s2[1] - 0.5).abs() <= 0.02, "{s2:?}");
    }
    assert_eq!(doc["result"]["runs"].as_array().unwrap().len(), 25);
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = r#"{"posterior": {"truth": [0.0107, 0.276, 0.1874], "sigma": 0.001, "mcmc": {"n_steps": 600, "burn_in": 200}}}"#;
    let ca = write_config(a.path(), cfg);
    let cb = write_config(b.path(), cfg);
    ok(a.path(), &["--seed", "5", "--config", ca.to_str().unwrap(), "posterior"]);
    ok(b.path(), &["--seed", "5", "--config", cb.to_str().unwrap(), "posterior"]);
    let read = |d: &Path| std::fs::read(d.join("posterior.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    ok(b.path(), &["--seed", "6", "--config", cb.to_str().unwrap(), "posterior"]);
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn posterior_summary_has_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), r#"{"posterior": {"mcmc": {"n_steps": 4000, "burn_in": 1000}}}"#);
    ok(dir.path(), &["--config", c.to_str().unwrap(), "--format", "csv", "posterior"]);
    let doc = read_json(dir.path().join("posterior.json"));
    let table = doc["result"]["table"].as_array().unwrap();
    let names: Vec<&str> = table.iter().map(|r| r["parameter"].as_str().unwrap()).collect();
    assert_eq!(names, ["A", "b1", "b2"]);
    for r in table {
        let (lo, mean, hi) = (r["lower"].as_f64().unwrap(), r["mean"].as_f64().unwrap(), r["upper"].as_f64().unwrap());
        assert!(lo < mean && mean < hi);
    }
    let samples = std::fs::read_to_string(dir.path().join("posterior.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 3000);
}

#[test]
fn provenance_is_embedded() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "9", "stability"]);
    let doc = read_json(dir.path().join("stability.json"));
    let p = &doc["provenance"];
    assert_eq!(p["seed"], 9);
    assert_eq!(p["command"], "stability");
    assert_eq!(p["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(p["version"], env!("CARGO_PKG_VERSION"));
    let r = &doc["result"];
    let (num, closed) = (r["det_numeric"].as_f64().unwrap(), r["det_closed"].as_f64().unwrap());
    assert!(((num - closed) / num).abs() < 1e-9);
}

#[test]
fn oracle_freeze_and_compare_write_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["oracle", "freeze"]);
    let doc = read_json(dir.path().join("oracle.json"));
    assert_eq!(doc["result"]["quadrature"].as_array().unwrap().len(), 5);
    let c = write_config(
        dir.path(),
        r#"{"compare": {"mu_b1": [0.2, 0.4], "n_psi": 8, "eig": {"n_out": 20, "n_in": 20}}}"#,
    );
    ok(dir.path(), &["--config", c.to_str().unwrap(), "--format", "csv", "compare-designs"]);
    let text = std::fs::read_to_string(dir.path().join("compare-designs.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn empty_invocation_prints_usage() {
    let o = bin().output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), r#"{"newton": {"alpha": 0.5, "step": 1}}"#);
    let o = run(dir.path(), &["--config", c.to_str().unwrap(), "newton"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
    let c = write_config(dir.path(), r#"{"anomaly": {"b1": 0.9, "b2": 0.0, "a1": 0.2, "a2": 0.1, "xi_deg": 0}}"#);
    assert_eq!(run(dir.path(), &["--config", c.to_str().unwrap(), "forward"]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("far.json");
    // Ratios whose Apollonius circles never meet.
    std::fs::write(&data, r#"{"design": [0.0, 1.5707963267948966, 3.141592653589793], "values": [1.0, 1e8, 1e4]}"#).unwrap();
    let o = run(dir.path(), &["invert", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(dir.path().join("error.json"));
    assert!(doc["result"]["message"].as_str().unwrap().contains("range"), "{doc}");
    assert_eq!(doc["provenance"]["command"], "invert");
}

#[test]
fn embedded_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), r#"{"grid": {"n_phi": 16, "n_psi": 8}, "point": {"area": 0.02, "b1": 0.1, "b2": -0.3}}"#);
    ok(dir.path(), &["--seed", "3", "--config", c.to_str().unwrap(), "oed-det"]);
    let first = read_json(dir.path().join("oed-det.json"));
    let replay = write_config(dir.path(), &first["provenance"]["config"].to_string());
    ok(dir.path(), &["--config", replay.to_str().unwrap(), "oed-det"]);
    let second = read_json(dir.path().join("oed-det.json"));
    assert_eq!(first["provenance"]["config_sha256"], second["provenance"]["config_sha256"]);
    assert_eq!(first["result"], second["result"]);
}
