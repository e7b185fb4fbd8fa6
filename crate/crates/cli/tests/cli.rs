use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lmcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmcf"))
        .args(args)
        .env("LMCF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn quadratic_preset_runs_and_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = lmcf(&["flow", "run", "--preset", "quadratic-exact", "--output", s(&out), "--check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&out.join("summary.json"));
    assert!(summary["metrics"]["sup_error"].as_f64().unwrap() <= 1e-10);
    assert_eq!(summary["status"], "ok");
    assert!(out.join("monitors.csv").is_file());
    assert!(out.join("snapshots/snap_0000.bin").is_file());
    // the resolved config is written beside the outputs and reproduces the run
    let again = tmp.path().join("again");
    let o = lmcf(&["flow", "run", "--config", s(&out.join("config.toml")), "--output", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("snapshots/snap_0001.bin")).unwrap(),
        fs::read(again.join("snapshots/snap_0001.bin")).unwrap()
    );
}

#[test]
fn manifest_lists_every_output_with_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&lmcf(&["flow", "run", "--preset", "quadratic-exact", "--output", s(&out)])), 0);
    let manifest = json(&out.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    for expected in ["config.toml", "monitors.csv", "report.json", "summary.json", "snapshots/snap_0000.bin"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in files {
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
        let bytes = fs::metadata(out.join(f["path"].as_str().unwrap())).unwrap().len();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes);
    }
}

#[test]
fn small_grid_is_a_config_error_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        "preset = \"quadratic-exact\"\n[grid]\nn = 2\nhalf_width = 2.0\npoints = 3\n",
    );
    let o = lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 5") && err.contains("at least 5"), "{err}");
}

#[test]
fn unknown_preset_lists_available() {
    let o = lmcf(&["flow", "run", "--preset", "no-such-preset"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for p in ["quadratic-exact", "condition-b", "decay-1d", "plane-1d"] {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn json_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{
  "preset": "quadratic-exact",
  "flow": {"tau": 1.0, "t_end": 0.25}
}"#,
    );
    let out = tmp.path().join("o");
    let o = lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&out.join("summary.json"))["metrics"]["t_final"].as_f64().unwrap(), 0.25);
}

#[test]
fn failed_check_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "preset = \"quadratic-exact\"\n[check.sup_error]\nmax = 1e-300\n",
    );
    let out = tmp.path().join("o");
    assert_eq!(code(&lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&out)])), 0);
    let o = lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&out), "--check"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn nonconvex_data_exits_3_with_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = lmcf(&["analyze", "blowdown", "--preset", "plane-1d", "--output", s(&out)]);
    // blow-down needs a quadratic far field: the forced pipeline is rejected up front
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = lmcf(&["flow", "run", "--preset", "plane-1d", "--output", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("convexity"));
    assert_eq!(json(&out.join("summary.json"))["status"], "aborted");
    assert!(out.join("snapshots/snap_0000.bin").is_file());
}

#[test]
fn emit_writes_long_format_plotdata() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&lmcf(&["flow", "run", "--preset", "quadratic-exact", "--output", s(&out)])), 0);
    let o = lmcf(&["emit", "--dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("plotdata.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("quantity,t,value"));
    assert!(text.contains("\nlambda_min,"));
    let missing = lmcf(&["emit", "--dir", s(&tmp.path().join("nothing"))]);
    assert_ne!(code(&missing), 0);
    assert!(stderr(&missing).contains("summary.json"));
}

#[test]
fn expander_shoot_prints_profile_csv() {
    let o = lmcf(&["expander", "shoot", "--n", "1", "--a", "-0.1", "--rmax", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("r,u,du,ddu"));
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let exact = -0.1 + 0.5 * (-0.1f64).exp() * last[0] * last[0];
    assert!((last[1] - exact).abs() < 1e-8, "{last:?}");
    assert_eq!(code(&lmcf(&["expander", "shoot", "--n", "4", "--a", "0", "--rmax", "1"])), 2);
}

#[test]
fn expander_newton_and_certify() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = lmcf(&["expander", "newton", "--preset", "expander-radial", "--output", s(&out), "--check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("profile.csv").is_file());
    let cert = tmp.path().join("cert.json");
    let o = lmcf(&[
        "expander",
        "certify",
        "--input",
        s(&out.join("snapshots/snap_0000.bin")),
        "--output",
        s(&cert),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&cert)["certified"], true);
}

#[test]
fn legendre_and_condition_on_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = write(
        tmp.path(),
        "c.toml",
        "preset = \"quadratic-exact\"\n[grid]\nn = 2\nhalf_width = 2.0\npoints = 33\n[flow]\ntau = 1.0\nt_end = 0.5\n[flow.snapshots]\nkind = \"uniform\"\ninterval = 0.125\n",
    );
    assert_eq!(code(&lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&out)])), 0);
    let snap = out.join("snapshots/snap_0000.bin");
    let dual = tmp.path().join("dual.csv");
    let o = lmcf(&["legendre", "transform", "--input", s(&snap), "--output", s(&dual)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(&dual).unwrap().starts_with("# {"));
    let o = lmcf(&["legendre", "check-dual", "--trajectory", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["dual_flow_residual"].as_f64().unwrap() < 1e-8, "{v}");
    let ok = lmcf(&["analyze", "condition", "--input", s(&snap), "--lambda", "1.5", "--Lambda", "2.5"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let bad = lmcf(&["analyze", "condition", "--input", s(&snap), "--lambda", "2.5", "--Lambda", "3"]);
    assert_eq!(code(&bad), 4);
}

#[test]
fn mcf_reconstruct_from_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = write(
        tmp.path(),
        "c.toml",
        "preset = \"mcf-bump\"\n[grid]\nn = 2\nhalf_width = 4.0\npoints = 33\n[flow]\ntau = 1.0\nt_end = 0.2\n[flow.snapshots]\nkind = \"uniform\"\ninterval = 0.02\n",
    );
    let o = lmcf(&["flow", "run", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seeds = write(tmp.path(), "seeds.txt", "# x y\n0.0, 0.0\n0.5 -0.5\n");
    let paths = tmp.path().join("paths.csv");
    let o = lmcf(&[
        "mcf",
        "reconstruct",
        "--trajectory",
        s(&out),
        "--seeds",
        s(&seeds),
        "--output",
        s(&paths),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&paths).unwrap();
    assert!(text.lines().count() > 2);
}

#[test]
fn decay_analysis_on_saved_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = lmcf(&["flow", "run", "--preset", "decay-1d", "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = tmp.path().join("fit.json");
    let o = lmcf(&["analyze", "decay", "--trajectory", s(&out), "--order", "3", "--output", s(&fit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = json(&fit);
    assert_eq!(v[0]["quantity"], "D3norm2");
    assert!(v[0]["exponent"].as_f64().unwrap() < 0.0);
    assert_eq!(code(&lmcf(&["emit", "--dir", s(&out)])), 0);
    let rows = fs::read_to_string(out.join("plotdata.csv"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("D3norm2,"))
        .count();
    assert!(rows >= 5, "{rows}");
}
