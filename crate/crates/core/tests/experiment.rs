mod common;

use std::fs;
use std::path::Path;

use xbar_snn::crossbar::CircuitMode;
use xbar_snn::harness::{read_report, run_experiment, run_experiment_to_csv, ExperimentConfig, Method};

fn config(data: &Path, work: &Path, sizes: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{"name": "mnist", "path": "."}},
            "architecture": {{"name": "vgg5", "channels": [2, 4], "hidden": [16]}},
            "methods": ["ann", "surrogate", "bntt"],
            "timesteps": [2],
            "train": {{"epochs": 1, "lr": 0.002, "batch_size": 25}},
            "xbar_sizes": {sizes},
            "adapt_samples": [0, 16],
            "seeds": [0, 1],
            "work_dir": "."
        }}"#
    ))
    .unwrap();
    cfg.dataset.path = data.to_path_buf();
    cfg.work_dir = work.to_path_buf();
    cfg
}

#[test]
fn software_only_sweep_has_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_toy_mnist(&data, 100, 40, 8, 1);
    let outcome = run_experiment(&config(&data, &dir.path().join("w"), "[0]")).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.reports.len(), 3 * 2);
    for r in &outcome.reports {
        assert_eq!(r.xbar_size, 0);
        assert_eq!(r.circuit_mode, CircuitMode::Ideal);
        assert_eq!(r.hw_accuracy, r.sw_accuracy);
        assert_eq!(r.delta, 0.0);
    }
    assert!(outcome.adapt_reports.is_empty(), "no crossbar, nothing to adapt");
}

#[test]
fn interrupted_run_resumes_to_the_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_toy_mnist(&data, 100, 40, 8, 2);

    let full_csv = dir.path().join("full.csv");
    let full = run_experiment_to_csv(&config(&data, &dir.path().join("full"), "[0, 8]"), &full_csv).unwrap();
    assert!(full.failures.is_empty());
    assert_eq!(full.reports.len(), 3 * 2 * 2);
    assert_eq!(full.adapt_reports.len(), 2 * 2);

    // a run that stopped part way: some models and cells exist, others not
    let work = dir.path().join("resumed");
    let cfg = config(&data, &work, "[0, 8]");
    run_experiment(&cfg).unwrap();
    let cells: Vec<_> = fs::read_dir(work.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    for (k, p) in cells.iter().enumerate() {
        if k % 2 == 0 {
            fs::remove_file(p).unwrap();
        }
    }
    fs::remove_file(work.join("models/bntt_t2.xsnn")).unwrap();
    let csv = dir.path().join("resumed.csv");
    run_experiment_to_csv(&cfg, &csv).unwrap();

    assert_eq!(fs::read(&csv).unwrap(), fs::read(&full_csv).unwrap());
    assert_eq!(
        fs::read(dir.path().join("resumed_adapt.csv")).unwrap(),
        fs::read(dir.path().join("full_adapt.csv")).unwrap()
    );

    let rows = read_report(&csv).unwrap();
    let hw_rows: Vec<_> = rows.iter().filter(|r| r.xbar_size == 8).collect();
    assert!(hw_rows.iter().all(|r| r.circuit_mode == CircuitMode::Nodal));
    assert!(rows.iter().any(|r| r.method == Method::Bntt));
}

#[test]
fn finished_cells_are_not_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_toy_mnist(&data, 60, 20, 8, 3);
    let work = dir.path().join("w");
    let mut cfg = config(&data, &work, "[0]");
    cfg.methods = vec![Method::Ann];
    let first = run_experiment(&cfg).unwrap();
    let cell = work.join("cells/ann_t0_x0_s0.json");
    let mut stored: serde_json::Value = serde_json::from_slice(&fs::read(&cell).unwrap()).unwrap();
    let sw = first.reports.iter().find(|r| r.seed == 0).unwrap().sw_accuracy;
    assert_eq!(stored["report"]["sw_accuracy"], sw);
    // doctor the stored cell: a resumed run must trust it rather than recompute
    stored["report"]["sw_accuracy"] = 12.5.into();
    fs::write(&cell, serde_json::to_vec(&stored).unwrap()).unwrap();
    let second = run_experiment(&cfg).unwrap();
    assert_eq!(second.reports.iter().find(|r| r.seed == 0).unwrap().sw_accuracy, 12.5);
}

#[test]
fn invalid_configs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("missing"), &dir.path().join("w"), "[0]");
    assert!(run_experiment(&cfg).is_err());
    let data = dir.path().join("data");
    common::write_toy_mnist(&data, 20, 10, 8, 4);
    let mut cfg = config(&data, &dir.path().join("w"), "[0]");
    cfg.methods = vec![Method::Conversion];
    assert!(run_experiment(&cfg).is_err(), "conversion without conversion_timesteps");
}
