use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use agrocausal::cli::{run_stage, CliError, Command, RunConfig, EXIT_CONFIG, EXIT_DATA};
use agrocausal::data_model::CrossSectionTable;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

const FAST: &str = r#"
[overlap]
model = { family = "logistic", l2_penalty = 0.0 }

[nuisance]
outcome_model = { mode = "fixed", spec = { family = "random_forest", n_trees = 40, min_samples_leaf = 10 } }
treatment_model = { mode = "fixed", spec = { family = "logistic", l2_penalty = 0.0 } }

[final_stage]
kind = "causal_forest"
spec = { n_trees = 100 }

[simulate]
n = 1500
theta = { kind = "constant", c = 2.0 }
"#;

fn config(out: &Path, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml(&format!("seed = 11\n{extra}\n{FAST}")).unwrap();
    cfg.out = Some(out.to_path_buf());
    cfg
}

fn ingest_config(out: &Path) -> RunConfig {
    let mut cfg = config(out, "");
    cfg.input.panel = Some(fixture("panel.csv"));
    cfg.input.parcels = Some(fixture("parcels.geojson"));
    cfg.input.grid = Some(fixture("grid.csv"));
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn ingest_and_practices_write_per_cell_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ingest_config(dir.path());
    let m = run_stage(Command::Ingest, &cfg).unwrap();
    assert!(m.manifest.outputs.contains_key("panel.csv"));
    assert!(m.manifest.inputs.contains_key("parcels.geojson"));
    let panel = String::from_utf8(read(dir.path(), "panel.csv")).unwrap();
    // cell d covers half its area and is filtered out
    assert!(!panel.lines().any(|l| l.starts_with("d,")));
    assert_eq!(panel.lines().count(), 1 + 3 * 3);
    let abundances = String::from_utf8(read(dir.path(), "abundances.csv")).unwrap();
    assert!(abundances.contains("2011,c,potato,0.2"));

    run_stage(Command::Practices, &cfg).unwrap();
    let table = CrossSectionTable::load(dir.path().join("cross_section_cr.csv")).unwrap();
    assert_eq!(table.len(), 3);
    let raw: Vec<f64> = table.rows.iter().map(|r| r.treatment_raw).collect();
    assert_eq!(raw.len(), 3);
    assert!(raw[0].abs() < 1e-12 && (raw[1] - 0.2).abs() < 1e-12 && (raw[2] - 0.4).abs() < 1e-12);
    let treated: Vec<u8> = table.rows.iter().map(|r| r.treatment.unwrap()).collect();
    assert_eq!(treated, vec![0, 0, 1]);

    let lcd = RunConfig {
        treatment: agrocausal::practices::TreatmentKind::LandscapeCropDiversity,
        ..cfg.clone()
    };
    run_stage(Command::Practices, &lcd).unwrap();
    assert!(dir.path().join("cross_section_lcd.csv").is_file());
    assert!(dir.path().join("manifest_practices_lcd.json").is_file());
}

#[test]
fn rerun_gives_identical_intermediates() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let cfg = ingest_config(dir);
        run_stage(Command::Ingest, &cfg).unwrap();
        run_stage(Command::Practices, &cfg).unwrap();
    }
    for name in [
        "panel.csv",
        "abundances.csv",
        "practices_cr.csv",
        "cross_section_cr.csv",
        "manifest_ingest.json",
        "manifest_practices_cr.json",
    ] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn malformed_panel_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    let text = fs::read_to_string(fixture("panel.csv")).unwrap().replacen("0.782", "n/a", 1);
    fs::write(&bad, text).unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.input.panel = Some(bad);
    let err = run_stage(Command::Ingest, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_DATA);
    assert!(err.to_string().contains("row 1"), "{err}");
}

#[test]
fn report_before_fit_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(Command::Report, &config(dir.path(), "")).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact { stage: "fit", .. }), "{err}");
    assert_eq!(err.exit_code(), EXIT_DATA);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_agrocausal");
    let dir = tempfile::tempdir().unwrap();
    let status = Process::new(bin).args(["fit", "--out"]).arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG), "no seed");
    let status = Process::new(bin)
        .args(["report", "--seed", "1", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_DATA));
    let status = Process::new(bin)
        .args(["simulate", "--seed", "1", "--treatment", "lcd", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("cross_section_lcd.csv").is_file());
    let status = Process::new(bin).args(["bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));

    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "seed = 1\n[overlap]\nlow = 0.9\nhigh = 0.1\n").unwrap();
    let status = Process::new(bin)
        .args(["fit", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
}

#[test]
fn simulated_pipeline_recovers_the_effect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    for stage in [Command::Simulate, Command::Fit, Command::Interpret, Command::Report] {
        run_stage(stage, &cfg).unwrap();
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path(), "summary_cr.json")).unwrap();
    let ate = summary["ate"].as_f64().unwrap();
    assert!((ate - 2.0).abs() < 0.3, "{ate}");

    let tree: serde_json::Value = serde_json::from_slice(&read(dir.path(), "tree_cr.json")).unwrap();
    fn leaves(node: &serde_json::Value) -> usize {
        match node["kind"].as_str().unwrap() {
            "leaf" => 1,
            _ => leaves(&node["left"]) + leaves(&node["right"]),
        }
    }
    assert!(leaves(&tree["root"]) <= 4);

    // every output appears in exactly one manifest
    let mut owners = std::collections::BTreeMap::new();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.starts_with("manifest_") {
            let m: serde_json::Value = serde_json::from_slice(&read(dir.path(), &name)).unwrap();
            for out in m["outputs"].as_object().unwrap().keys() {
                assert!(owners.insert(out.clone(), name.clone()).is_none(), "{out} claimed twice");
            }
        }
    }
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(name.starts_with("manifest_") || owners.contains_key(&name), "{name} untracked");
    }
}
