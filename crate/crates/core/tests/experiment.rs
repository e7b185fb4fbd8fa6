use std::fs;

use lmcf_core::config::ExperimentConfig;
use lmcf_core::experiment::{emit_plotdata, initial_grid, run_experiment, write_monitors, ExperimentError};

fn plot_rows(text: &str, quantity: &str) -> usize {
    text.lines().filter(|l| l.starts_with(&format!("{quantity},"))).count()
}

#[test]
fn empty_monitors_give_header_only_plotdata() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("summary.json"), "{}").unwrap();
    write_monitors(&tmp.path().join("monitors.csv"), &[]).unwrap();
    let out = emit_plotdata(tmp.path()).unwrap();
    assert_eq!(fs::read_to_string(out).unwrap(), "quantity,t,value\n");
}

#[test]
fn plotdata_needs_a_completed_run() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(emit_plotdata(tmp.path()), Err(ExperimentError::MissingArtifact(_))));
}

#[test]
fn decay_run_emits_rate_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_preset("decay-1d").unwrap();
    let o = run_experiment(&cfg, Some(tmp.path())).unwrap();
    assert!(o.summary.metrics.contains_key("exponent_D3norm2"));
    let text = fs::read_to_string(emit_plotdata(tmp.path()).unwrap()).unwrap();
    assert!(plot_rows(&text, "D3norm2") >= 5);
    assert!(plot_rows(&text, "D4norm2") >= 5);
    assert!(plot_rows(&text, "lambda_min") > 0);
}

#[test]
fn blowdown_run_emits_error_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_preset("blowdown-1d").unwrap();
    run_experiment(&cfg, Some(tmp.path())).unwrap();
    let text = fs::read_to_string(emit_plotdata(tmp.path()).unwrap()).unwrap();
    assert!(plot_rows(&text, "blowdown_error") >= 3, "{text}");
}

#[test]
fn seeded_noise_is_reproducible() {
    let text = "preset = \"condition-b\"\nseed = 7\nnoise = 1e-4\n";
    let a = initial_grid(&ExperimentConfig::parse(text).unwrap()).unwrap();
    let b = initial_grid(&ExperimentConfig::parse(text).unwrap()).unwrap();
    let c = initial_grid(&ExperimentConfig::parse(&text.replace("seed = 7", "seed = 8")).unwrap()).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
    let clean = initial_grid(&ExperimentConfig::from_preset("condition-b").unwrap()).unwrap();
    let d = *clean.domain();
    for i in 0..d.len() {
        let diff = (a.value(i) - clean.value(i)).abs();
        if d.boundary_distance(i) == 0 {
            assert_eq!(diff, 0.0);
        } else {
            assert!(diff <= 1e-4);
        }
    }
}

#[test]
fn rerun_is_deterministic_apart_from_the_manifest_timestamp() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse("preset = \"condition-b\"\n[flow]\ntau = 1.0\nt_end = 0.25\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&cfg, Some(&a)).unwrap();
    run_experiment(&cfg, Some(&b)).unwrap();
    for f in ["report.json", "summary.json", "monitors.csv", "config.toml", "snapshots/snap_0001.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |p: &std::path::Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("created");
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn resolved_config_is_written_and_reloads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_preset("legendre-dual").unwrap();
    run_experiment(&cfg, Some(tmp.path())).unwrap();
    let back = ExperimentConfig::load(&tmp.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
}
