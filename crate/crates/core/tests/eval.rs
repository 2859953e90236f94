mod common;

use std::time::Instant;

use common::{data_path, toy_config};
use hypertext::eval::{self, Dataset, SweepOptions};
use hypertext::model::Geometry;
use hypertext::optim::LR_GRID;

fn toy() -> Dataset {
    let p = data_path("toy.txt");
    Dataset::load("toy", &p, &p, &toy_config(Geometry::Hyperbolic).corpus).unwrap()
}

fn untimed() -> SweepOptions {
    SweepOptions { record_timing: false, ..Default::default() }
}

fn jsonl(write: impl FnOnce(&mut Vec<u8>)) -> String {
    let mut buf = Vec::new();
    write(&mut buf);
    String::from_utf8(buf).unwrap()
}

#[test]
fn toy_dimension_sweep() {
    let data = toy();
    let started = Instant::now();
    let report = eval::run_dimension_sweep(
        &data,
        &[4, 2],
        &[Geometry::Euclidean, Geometry::Hyperbolic],
        &toy_config(Geometry::Hyperbolic),
        &SweepOptions::default(),
    )
    .unwrap();
    assert!(started.elapsed().as_secs() < 60);
    let keys: Vec<(String, usize)> = report.rows.iter().map(|r| (r.geometry.clone(), r.dim)).collect();
    assert_eq!(
        keys,
        [("euclidean", 2), ("euclidean", 4), ("hyperbolic", 2), ("hyperbolic", 4)].map(|(g, d)| (g.to_string(), d))
    );
    for r in &report.rows {
        assert!(r.error.is_none());
        assert!(r.flops_est > 0.0 && r.train_seconds >= 0.0);
    }
    assert_eq!(report.row(Geometry::Hyperbolic, 4).unwrap().accuracy, 1.0);
    assert_eq!(report.row(Geometry::Euclidean, 4).unwrap().accuracy, 1.0);
}

#[test]
fn untimed_reports_are_reproducible() {
    let data = toy();
    let cfg = toy_config(Geometry::Hyperbolic);
    let sweep = || {
        let r = eval::run_dimension_sweep(&data, &[2, 4], &[Geometry::Hyperbolic, Geometry::Euclidean], &cfg, &untimed())
            .unwrap();
        jsonl(|b| r.write_jsonl(b).unwrap())
    };
    let first = sweep();
    assert_eq!(first, sweep());
    let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["report"], "dimension_sweep");
    assert_eq!(header["flops_convention"]["multiply_add"], 2.0);
    for line in first.lines().skip(1) {
        let row: eval::SweepRow = serde_json::from_str(line).unwrap();
        assert_eq!(row.train_seconds, 0.0);
        assert_eq!(row.dataset, "toy");
    }

    let ablate = || jsonl(|b| eval::run_ablations(&data, &cfg, &untimed()).unwrap().write_jsonl(b).unwrap());
    assert_eq!(ablate(), ablate());
}

#[test]
fn toy_ablation_variants_all_separate() {
    let data = toy();
    let report = eval::run_ablations(&data, &toy_config(Geometry::Hyperbolic), &untimed()).unwrap();
    let variants: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, ["full", "-PE&EM", "-ML"]);
    for r in &report.rows {
        assert_eq!(r.row.accuracy, 1.0, "{}", r.variant);
    }
    let json = jsonl(|b| report.write_jsonl(b).unwrap());
    let header: serde_json::Value = serde_json::from_str(json.lines().next().unwrap()).unwrap();
    assert!(header["ablation_convention"].as_str().unwrap().contains("mobius"));
    let row: serde_json::Value = serde_json::from_str(json.lines().nth(2).unwrap()).unwrap();
    assert_eq!((row["variant"].as_str(), row["classifier"].as_str()), (Some("-PE&EM"), Some("mobius")));
}

#[test]
fn lr_selection_on_validation_split() {
    let data = toy();
    let valid = data.validation_split(5);
    assert_eq!((valid.train.len(), valid.test.len()), (16, 4));
    let (accs, best) = eval::select_lr(&valid, &LR_GRID, &toy_config(Geometry::Euclidean)).unwrap();
    assert_eq!(accs.len(), LR_GRID.len());
    assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(accs.iter().all(|&a| a <= accs[best]));
}

#[test]
fn parallel_and_sequential_accuracy_agree() {
    let data = toy();
    let out = hypertext::optim::train_documents(data.vocab.clone(), &data.train, &toy_config(Geometry::Hyperbolic)).unwrap();
    assert_eq!(
        eval::accuracy(&out.classifier, &data.test).unwrap(),
        eval::accuracy_sequential(&out.classifier, &data.test).unwrap()
    );
}
