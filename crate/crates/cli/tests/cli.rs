use std::path::Path;
use std::process::{Command, Output};

fn icu_extract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icu-extract")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = icu_extract(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let out = dir.path().join("out");
    ok(&["gensynth", "--out-dir", s(&src), "--n-subjects", "250", "--seed", "4"]);
    assert!(src.join("ground_truth.json").is_file());
    ok(&["extract", "--source-dir", s(&src), "--out-dir", s(&out), "--min-age", "16"]);
    for f in ["patients.csv", "vitals_labs.csv", "vitals_labs_mean.csv", "interventions.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["min_age"], 16.0);
    assert!(manifest["resources"]["variable_ranges.csv"].as_str().unwrap().starts_with("builtin:"));

    ok(&["prep", "--source-dir", s(&out), "--task", "fixed", "--seed", "2"]);
    ok(&["prep", "--source-dir", s(&out), "--task", "dynamic", "--target", "vaso"]);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("samples_dynamic.json")).unwrap()).unwrap();
    assert_eq!(sidecar["sentinel"], 7.0);
    assert_eq!(sidecar["target"], "vaso");

    let stdout = ok(&["eval", "--source-dir", s(&out), "--task", "mort_icu", "--iterations", "50"]);
    assert!(stdout.contains("\"auroc\""));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics_mort_icu.json")).unwrap()).unwrap();
    let auroc = metrics["binary"]["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    let report = ok(&["report", "--source-dir", s(&out)]);
    assert!(report.contains("Ethnicity") && report.contains("First Careunit"));
    assert!(out.join("cohort_summary.csv").is_file() && out.join("variable_presence.csv").is_file());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = icu_extract(&["extract", "--source-dir", s(&dir.path().join("nope")), "--out-dir", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("ingest failed"));

    let bad = icu_extract(&["extract", "--source-dir", s(dir.path()), "--out-dir", s(dir.path()), "--min-percent", "120"]);
    assert_eq!(bad.status.code(), Some(2));

    let no_samples = icu_extract(&["eval", "--source-dir", s(dir.path()), "--task", "los3"]);
    assert_eq!(no_samples.status.code(), Some(3));

    let usage = icu_extract(&["extract"]);
    assert_eq!(usage.status.code(), Some(2));
}
