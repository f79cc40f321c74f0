use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jumphmm::fixtures::two_class_model;
use jumphmm::io::{read_model, write_model, ModelDocument};
use jumphmm::HierarchicalModel;
use tempfile::TempDir;

fn jumphmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jumphmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(o)
    );
}

fn save_model(dir: &Path, name: &str, model: &HierarchicalModel) -> PathBuf {
    let p = dir.join(name);
    write_model(&p, model).unwrap();
    p
}

fn save_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Simulates `size` sequences from `model` into `dir/<name>/records.csv`.
fn simulate(dir: &Path, name: &str, model: &Path, size: usize, seed: u64) -> PathBuf {
    let cfg = save_config(dir, &format!("{name}.toml"), &format!("[simulate]\nsize = {size}\n"));
    let out = dir.join(name);
    ok(&jumphmm(&[
        "simulate",
        "--config",
        path(&cfg),
        "--model",
        path(model),
        "--out",
        path(&out),
        "--seed",
        &seed.to_string(),
    ]));
    out.join("records.csv")
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_empty_cohort_writes_header_only() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let records = simulate(dir.path(), "sim", &model, 0, 1);
    assert_eq!(
        fs::read_to_string(records).unwrap(),
        "individual_id,age,test_type,grade_counts,treated\n"
    );
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let a = simulate(dir.path(), "a", &model, 50, 9);
    let b = simulate(dir.path(), "b", &model, 50, 9);
    let c = simulate(dir.path(), "c", &model, 50, 10);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/truth.json")).unwrap(),
        fs::read(dir.path().join("b/truth.json")).unwrap()
    );
    assert!(dir.path().join("a/manifest.json").is_file());
}

#[test]
fn simulated_class_frequencies_match_prior() {
    let dir = TempDir::new().unwrap();
    let truth = two_class_model();
    let model = save_model(dir.path(), "m.json", &truth);
    simulate(dir.path(), "sim", &model, 10_000, 3);
    let text = fs::read_to_string(dir.path().join("sim/truth.json")).unwrap();
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    let n = records.len() as f64;
    let ones = records.iter().filter(|r| r["class"] == 1).count() as f64;
    let p = truth.class_prior[1];
    let se = (p * (1.0 - p) / n).sqrt();
    assert!((ones / n - p).abs() < 3.0 * se, "{} vs {p}", ones / n);
}

#[test]
fn fit_smoke_run() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let records = simulate(dir.path(), "sim", &model, 200, 4);
    let cfg = save_config(
        dir.path(),
        "fit.toml",
        "[model]\nnum_classes = 2\nnum_states = 3\nage_boundaries = [40.0]\n[em]\nem_iterations = 4\n",
    );
    let out = dir.path().join("fit");
    ok(&jumphmm(&[
        "fit",
        "--config",
        path(&cfg),
        "--records",
        path(&records),
        "--out",
        path(&out),
        "--seed",
        "1",
        "--threads",
        "2",
    ]));
    let trace = csv_rows(&out.join("loglik_trace.csv"));
    assert!(!trace.is_empty() && trace.len() <= 4);
    let fitted = read_model(&out.join("model.json")).unwrap();
    assert_eq!(fitted.num_classes(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["em"]["em_iterations"], 4);
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);

    // Same seed, different thread count: identical fitted model and trace.
    let again = dir.path().join("fit-again");
    ok(&jumphmm(&[
        "fit",
        "--config",
        path(&cfg),
        "--records",
        path(&records),
        "--out",
        path(&again),
        "--seed",
        "1",
        "--threads",
        "1",
    ]));
    for f in ["model.json", "loglik_trace.csv"] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn fit_with_zero_iterations_keeps_the_initial_model() {
    let dir = TempDir::new().unwrap();
    let truth = two_class_model();
    let model = save_model(dir.path(), "m.json", &truth);
    let records = simulate(dir.path(), "sim", &model, 30, 5);
    let cfg = save_config(dir.path(), "fit.toml", "[em]\nem_iterations = 0\n");
    let out = dir.path().join("fit");
    ok(&jumphmm(&[
        "fit",
        "--config",
        path(&cfg),
        "--model",
        path(&model),
        "--records",
        path(&records),
        "--out",
        path(&out),
    ]));
    assert_eq!(read_model(&out.join("model.json")).unwrap(), truth);
    assert!(csv_rows(&out.join("loglik_trace.csv")).is_empty());
}

#[test]
fn malformed_record_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let records = save_config(
        dir.path(),
        "bad.csv",
        "individual_id,age,test_type,grade_counts,treated\na,30,0,1,0,0,0,0\na,thirty,0,1,0,0,0,0\n",
    );
    let o = jumphmm(&["fit", "--records", path(&records), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":3:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let o = jumphmm(&["predict", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--model"));
    assert_eq!(jumphmm(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(jumphmm(&[]).status.code(), Some(1));
    let cfg = save_config(dir.path(), "bad.toml", "[em]\nem_iteratons = 3\n");
    let o = jumphmm(&["fit", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let o = jumphmm(&["simulate", "--threads", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

/// Frail class emits high grades far more often from the normal state.
fn separable_model() -> HierarchicalModel {
    let mut model = two_class_model();
    let mut em = model.emission.clone();
    em.grade_probs[0][0] = vec![0.1, 0.1, 0.4, 0.4];
    model.classes[1].emission = Some(em);
    model.class_prior = vec![0.5, 0.5];
    model.ensure_valid().unwrap();
    model
}

#[test]
fn predict_separates_classes() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &separable_model());
    let records = simulate(dir.path(), "held-out", &model, 1000, 6);
    let out = dir.path().join("predict");
    ok(&jumphmm(&[
        "predict",
        "--model",
        path(&model),
        "--records",
        path(&records),
        "--out",
        path(&out),
    ]));
    let metrics = csv_rows(&out.join("metrics.csv"));
    let auc: f64 = metrics.iter().find(|r| r[0] == "AUC").unwrap()[1]
        .parse()
        .unwrap();
    assert!(auc > 0.8, "AUC {auc}");
    let rows = csv_rows(&out.join("predictions.csv"));
    assert_eq!(rows.len(), 1000);
    for r in &rows {
        let p: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        let posterior: f64 = r[4..].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((posterior - 1.0).abs() < 1e-9);
    }
}

#[test]
fn identical_sequences_get_identical_predictions() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let mut text = String::from("individual_id,age,test_type,grade_counts,treated\n");
    for id in ["a", "b", "c"] {
        for age in [30, 33, 36] {
            text.push_str(&format!("{id},{age},0,2,1,0,0,0\n{id},{age},1,1,0,0\n"));
        }
    }
    text.push_str("d,30,0,1,0,0,0,0\n");
    let records = save_config(dir.path(), "same.csv", &text);
    let out = dir.path().join("predict");
    let o = jumphmm(&[
        "predict",
        "--model",
        path(&model),
        "--records",
        path(&records),
        "--out",
        path(&out),
    ]);
    ok(&o);
    assert!(stderr(&o).contains("skipped 1"), "{}", stderr(&o));
    let rows = csv_rows(&out.join("predictions.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
}

#[test]
fn predict_on_empty_records_fails() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let records = save_config(
        dir.path(),
        "empty.csv",
        "individual_id,age,test_type,grade_counts,treated\n",
    );
    let o = jumphmm(&[
        "predict",
        "--model",
        path(&model),
        "--records",
        path(&records),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn validate(dir: &Path, model: &Path, records: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&jumphmm(&[
        "validate",
        "--model",
        path(model),
        "--records",
        path(records),
        "--out",
        path(&out),
        "--seed",
        "11",
    ]));
    out
}

#[test]
fn validate_self_consistency_and_bands() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let records = simulate(dir.path(), "sim", &model, 2400, 12);
    let out = validate(dir.path(), &model, &records, "validate");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    let coverage = summary["km_coverage"].as_f64().unwrap();
    assert!(coverage >= 0.9, "coverage {coverage}");

    let bands = csv_rows(&out.join("risk_bands.csv"));
    assert_eq!(bands.len(), 2400);
    assert!(bands
        .iter()
        .all(|r| ["low", "unknown", "medium", "high"].contains(&r[2].as_str())));
    let counted: u64 = summary["risk_band_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c[1].as_u64().unwrap())
        .sum();
    assert_eq!(counted, 2400);
    assert!(out.join("km.csv").is_file() && out.join("diagnostics.csv").is_file());
}

#[test]
fn validate_without_progression_keeps_survival_at_one() {
    let dir = TempDir::new().unwrap();
    let mut doc = ModelDocument::from(&two_class_model());
    for class in &mut doc.classes {
        for seg in &mut class.intensity {
            seg.iter_mut().flatten().for_each(|q| *q = 0.0);
        }
        class.initial = vec![vec![1.0, 0.0, 0.0]; 2];
    }
    doc.emission.grade_probs[0][0] = vec![0.6, 0.4, 0.0, 0.0];
    let still = doc.to_model().unwrap();
    let model = save_model(dir.path(), "still.json", &still);
    let records = simulate(dir.path(), "sim", &model, 300, 13);
    let out = validate(dir.path(), &model, &records, "validate");
    for row in csv_rows(&out.join("km.csv")) {
        assert_eq!(row[1], "1");
        assert_eq!(row[2], "1");
    }
}

#[test]
fn check_gradients_reports_small_error() {
    let dir = TempDir::new().unwrap();
    let model = save_model(dir.path(), "m.json", &two_class_model());
    let out = dir.path().join("grad");
    let o = jumphmm(&[
        "check-gradients",
        "--model",
        path(&model),
        "--out",
        path(&out),
        "--seed",
        "2",
    ]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradient_check.json")).unwrap())
            .unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-5);
}
