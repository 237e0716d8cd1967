use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str], config: Option<&str>, out: &Path) -> (i32, String) {
    let dir = out.parent().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_torus-vm"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(text) = config {
        let path = dir.join(format!("{}.json", out.file_name().unwrap().to_string_lossy()));
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    let o = cmd.output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn rescale_check_at_unit_factor_is_the_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("unit");
    let config = r#"{"scaling": {"lambda": 1.0, "steps": 20, "particles": 32, "grid_n": 8, "k_max": 3}}"#;
    let (code, err) = run(&["rescale-check"], Some(config), &out);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["results"]["scaling"]["details"]["identity_error"], 0.0);
    // the full resolved configuration is echoed, defaults included
    assert_eq!(report["config"]["scaling"]["lambda"], 1.0);
    assert_eq!(report["config"]["approx"]["grid_n"], 64);
    assert!(out.join("residuals.csv").exists());
}

#[test]
fn malformed_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, err) = run(&["approx-sweep"], Some(r#"{"approx": {"c_list": [10]}}"#), &tmp.path().join("unknown"));
    assert_eq!(code, 2);
    assert!(err.contains("approx.c_list"), "{err}");
    let (code, err) = run(&["approx-sweep"], Some(r#"{"approx": {"t_end": "long"}}"#), &tmp.path().join("typed"));
    assert_eq!(code, 2);
    assert!(err.contains("approx.t_end"), "{err}");
    let (code, _) = run(&["approx-sweep"], Some(r#"{"approx": {"c_values": [10]}}"#), &tmp.path().join("short"));
    assert_eq!(code, 2);
    let (code, _) = run(&["approx-sweep"], Some("{"), &tmp.path().join("syntax"));
    assert_eq!(code, 2);
}

#[test]
fn approx_sweep_writes_identical_csv_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"{"approx": {"grid_n": 16, "k_max": 5, "t_end": 1.0}}"#;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&["approx-sweep"], Some(config), &a).0, 0);
    assert_eq!(run(&["approx-sweep", "--threads", "2"], Some(config), &b).0, 0);
    let first = fs::read(a.join("errors.csv")).unwrap();
    assert_eq!(first, fs::read(b.join("errors.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("c,t,errE,errB,bound"));
}

#[test]
fn failing_criteria_give_a_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    // a slope window that excludes first order
    let config = r#"{"approx": {"grid_n": 16, "k_max": 5, "t_end": 1.0, "slope_range": [-3.0, -2.0]}}"#;
    let (code, _) = run(&["approx-sweep"], Some(config), &tmp.path().join("window"));
    assert_eq!(code, 1);
}

#[test]
fn geometry_check_passes_and_lists_bad_directions() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("geo");
    assert_eq!(run(&["check-geometry", "--seed-override", "3"], None, &out).0, 0);
    let csv = fs::read_to_string(out.join("bad_directions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1")));
}
