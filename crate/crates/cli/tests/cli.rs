use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vortexlab"));
    c.env_remove("VORTEXLAB_OUT");
    c
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(dir: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn schema_subcommand() {
    let o = bin().arg("schema").output().unwrap();
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), ["report", "tree", "field", "timings", "scenario"]);
    let o = bin().args(["schema", "report"]).output().unwrap();
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["$schema"], "http://json-schema.org/draft-07/schema#");
    assert_eq!(bin().args(["schema", "nope"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn single_bubble_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["--threads", "2", "run"]).arg(scenario("single_bubble")).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["tree"]["conservation"]["total_degree"], 1);
    assert!((r["tree"]["conservation"]["total_energy"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    for f in ["tree.json", "tree.dot", "timings.json", "tables/atoms.csv", "tables/scales.csv", "heatmaps/energy_last.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn two_scale_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("run").arg(scenario("two_scale")).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report(dir.path())["tree"]["tree"]["depth"], 2);
}

#[test]
fn output_dir_from_environment() {
    let base = tempfile::tempdir().unwrap();
    let o = bin().env("VORTEXLAB_OUT", base.path()).arg("run").arg(scenario("smooth_map")).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report(&base.path().join("smooth_map"))["scenario"]["name"], "smooth_map");
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenario("smooth_map")).unwrap().replace("s0 = 16.0", "s0 = 5.0");
    std::fs::write(&bad, text).unwrap();
    let o = bin().arg("run").arg(&bad).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("4πr"));
    assert!(!dir.path().join("out").exists(), "nothing is computed before validation");
    let o = bin().arg("run").arg(dir.path().join("missing.toml")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kw_csv_and_solver_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("kw").arg(scenario("smooth_map")).args(["--count", "6", "--dump"]).arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("s,residual,distance_to_limit,iterations"));
    assert_eq!(lines.count(), 6);
    assert!(dir.path().join("phi_05.f64").exists() && dir.path().join("phi_05.json").exists());
    // an unreachable tolerance is a solver failure
    let o = bin().args(["--tol", "1e-30", "kw"]).arg(scenario("smooth_map")).args(["--s", "20"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_atoms_and_tree() {
    let o = bin().arg("sweep").arg(scenario("smooth_map")).output().unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("s,kw_residual,vortex_residual,degree"));
    for row in out.lines().skip(1) {
        let degree: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((degree - 2.0).abs() < 1e-8);
    }
    let o = bin().arg("atoms").arg(scenario("single_bubble")).output().unwrap();
    let atoms: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(atoms.as_array().unwrap().len(), 1);
    let o = bin().args(["tree", "--dot"]).arg(scenario("smooth_map")).output().unwrap();
    assert!(stdout(&o).starts_with("digraph"));
}

#[test]
fn holonomy_of_a_smooth_weight() {
    use vortexlab::sphere;
    let dir = tempfile::tempdir().unwrap();
    let g = sphere::build_grid(32).unwrap();
    let w = sphere::ScalarField::from_fn(&g, |p| 0.3 * p.theta.cos() + 0.1 * (2.0 * p.phi).sin() * p.theta.sin().powi(2));
    sphere::write_field_dump(&w, dir.path(), "w", "log-weight").unwrap();
    let o = bin()
        .arg("holonomy")
        .arg(dir.path().join("w.f64"))
        .args(["--center", "0.2,-0.1", "--alpha", "2.5", "--beta", "0.4"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["classification"]["kind"], "h");
    assert!((v["decaying_gauge"]["pullback_exponent"].as_f64().unwrap() - 1.5).abs() < 0.05);
    let o = bin().arg("holonomy").arg(dir.path().join("w.f64")).args(["--center", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
