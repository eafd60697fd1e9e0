use std::path::Path;
use std::process::Command;

use bnn_eol::bnn::{train, TrainConfig};
use bnn_eol::data::CellHistory;
use bnn_eol::features::{featurize, FeatureConfig, Standardizer};
use bnn_eol::predictor::{model_input, predict};
use bnn_eol::seed::rng_from;
use bnn_eol::synthetic::{generate_cell, generate_fleet, FleetRanges, Span, SyntheticCellParams};

fn noise_free_fleet(seed: u64, n: usize) -> Vec<CellHistory> {
    let ranges = FleetRanges {
        noise_scale: Span::fixed(0.0),
        ..Default::default()
    };
    generate_fleet(seed, n, &ranges).unwrap()
}

fn training_set(cells: &[CellHistory], c: u32) -> (Standardizer, Vec<Vec<f64>>, Vec<f64>) {
    let config = FeatureConfig::default();
    let fvs: Vec<_> = cells.iter().map(|h| featurize(h, c, &config).unwrap()).collect();
    let standardizer = Standardizer::fit(&fvs).unwrap();
    let inputs = fvs.iter().map(|fv| model_input(&standardizer, fv)).collect();
    let targets = cells.iter().map(|h| h.eol_cycle.unwrap() as f64).collect();
    (standardizer, inputs, targets)
}

fn train_mae(model: &bnn_eol::bnn::BnnModel, inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    inputs
        .iter()
        .zip(targets)
        .map(|(x, y)| (model.deterministic(x).unwrap().mean - y).abs())
        .sum::<f64>()
        / targets.len() as f64
}

#[test]
fn training_halves_the_train_error() {
    let cells = noise_free_fleet(8, 60);
    let (_, inputs, targets) = training_set(&cells, 100);
    let config = TrainConfig {
        seed: 2,
        ..Default::default()
    };
    let (initial, _) = train(&inputs, &targets, &TrainConfig { max_epochs: 0, ..config.clone() }).unwrap();
    let (trained, _) = train(&inputs, &targets, &config).unwrap();
    let before = train_mae(&initial, &inputs, &targets);
    let after = train_mae(&trained, &inputs, &targets);
    assert!(after <= 0.5 * before, "train MAE {before} -> {after}");
}

#[test]
fn held_out_noise_free_cell_is_predicted() {
    let c = 400;
    let cells = noise_free_fleet(12, 80);
    let (standardizer, inputs, targets) = training_set(&cells, c);
    let (model, _) = train(&inputs, &targets, &TrainConfig { seed: 1, ..Default::default() }).unwrap();
    let held_out = generate_cell(99, &SyntheticCellParams::default(), 800).unwrap();
    let p = predict(&model, &standardizer, &FeatureConfig::default(), &held_out, c, 100, &mut rng_from(5)).unwrap();
    let error = (p.mu - 800.0).abs() / 800.0;
    assert!(error < 0.15, "mu {} sigma {}", p.mu, p.sigma);
}

fn bnn_eol(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bnn-eol")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = bnn_eol(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_featurize_gives_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = dir.path().join("fleet.txt");
    let csv = dir.path().join("features.csv");
    run_ok(&["synth", "--seed", "3", "--cells", "3", "--out", s(&fleet), "--eol-range", "500:600"]);
    run_ok(&["featurize", "--in", s(&fleet), "--cycle", "100", "--out", s(&csv)]);
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 12);
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 12));
}

#[test]
fn exit_codes() {
    assert_eq!(bnn_eol(&["--help"]).status.code(), Some(0));
    assert_eq!(bnn_eol(&["synth", "--bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.txt");
    let out = bnn_eol(&["featurize", "--in", s(&missing), "--cycle", "100"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    let fleet = dir.path().join("fleet.txt");
    run_ok(&["synth", "--seed", "1", "--cells", "4", "--out", s(&fleet), "--eol-range", "500:600"]);
    let table = dir.path().join("t.csv");
    let json = dir.path().join("r.json");
    let out = bnn_eol(&[
        "evaluate", "--in", s(&fleet), "--seed", "0", "--models", "svr", "--out-table", s(&table), "--out-json", s(&json),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_commands_are_reproducible_and_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    run_ok(&["synth", "--seed", "5", "--cells", "6", "--out", s(&p("a.txt")), "--eol-range", "500:650"]);
    run_ok(&["synth", "--seed", "5", "--cells", "6", "--out", s(&p("b.txt")), "--eol-range", "500:650"]);
    let fleet = std::fs::read(p("a.txt")).unwrap();
    assert_eq!(fleet, std::fs::read(p("b.txt")).unwrap());

    for name in ["m1.json", "m2.json"] {
        run_ok(&["train", "--in", s(&p("a.txt")), "--cycle", "100", "--seed", "2", "--model-out", s(&p(name))]);
    }
    assert_eq!(std::fs::read(p("m1.json")).unwrap(), std::fs::read(p("m2.json")).unwrap());

    for name in ["p1.jsonl", "p2.jsonl"] {
        run_ok(&[
            "predict", "--model", s(&p("m1.json")), "--in", s(&p("a.txt")), "--cell", "syn5-0002", "--seed", "4", "--out",
            s(&p(name)),
        ]);
    }
    let first = std::fs::read_to_string(p("p1.jsonl")).unwrap();
    assert_eq!(first, std::fs::read_to_string(p("p2.jsonl")).unwrap());
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let (mu, sigma) = (record["mu"].as_f64().unwrap(), record["sigma"].as_f64().unwrap());
    let ci = record["ci95"].as_array().unwrap();
    assert!((ci[1].as_f64().unwrap() - ci[0].as_f64().unwrap() - 2.0 * 1.96 * sigma).abs() < 1e-6 * mu);

    assert_eq!(std::fs::read(p("a.txt")).unwrap(), fleet);
}
