mod common;

use common::{data_path, toy_config};
use hypertext::eval;
use hypertext::model::Geometry;
use hypertext::optim::{self, ball_violations};
use hypertext::{Curvature, TrainConfig};

fn toy_docs(cfg: &TrainConfig) -> (hypertext::Vocab, Vec<hypertext::Document>) {
    optim::load_corpus(&data_path("toy.txt"), &cfg.corpus).unwrap()
}

#[test]
fn toy_fixture_separates_in_both_geometries() {
    for g in [Geometry::Hyperbolic, Geometry::Euclidean] {
        let cfg = toy_config(g);
        let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
        let (_, docs) = toy_docs(&cfg);
        let acc = eval::accuracy(&out.classifier, &docs).unwrap();
        assert_eq!((acc.correct, acc.total), (20, 20), "{g}");
        assert_eq!(ball_violations(&out.classifier.model, 1), 0);
    }
}

#[test]
fn separates_for_every_seed() {
    for g in [Geometry::Hyperbolic, Geometry::Euclidean] {
        for seed in 1..=5 {
            let cfg = TrainConfig { seed, ..toy_config(g) };
            let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
            let (_, docs) = toy_docs(&cfg);
            assert_eq!(eval::accuracy(&out.classifier, &docs).unwrap().value(), 1.0, "{g} seed {seed}");
        }
    }
}

#[test]
fn loss_decreases_over_first_epochs() {
    for g in [Geometry::Hyperbolic, Geometry::Euclidean] {
        let cfg = TrainConfig { lr0: 0.05, ..toy_config(g) };
        let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
        let l = &out.epoch_losses;
        assert!(l[0] > l[1] && l[1] > l[2], "{g}: {l:?}");
    }
}

#[test]
fn initial_loss_is_log_n_labels() {
    let cfg = TrainConfig { lr0: 1e-9, epochs: 1, ..toy_config(Geometry::Hyperbolic) };
    let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
    assert!((out.epoch_losses[0] - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn single_thread_training_is_bit_reproducible() {
    for g in [Geometry::Hyperbolic, Geometry::Euclidean] {
        let cfg = toy_config(g);
        let a = optim::train(&data_path("toy.txt"), &cfg).unwrap();
        let b = optim::train(&data_path("toy.txt"), &cfg).unwrap();
        assert_eq!(a.classifier.model, b.classifier.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);

        let other = optim::train(&data_path("toy.txt"), &TrainConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.classifier.model, other.classifier.model);
    }
}

#[test]
fn multithreaded_training_stays_valid() {
    let cfg = TrainConfig {
        threads: 4,
        arch: hypertext::Architecture::hyperbolic(Curvature::new(2.0).unwrap()),
        ..toy_config(Geometry::Hyperbolic)
    };
    let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
    assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
    assert_eq!(ball_violations(&out.classifier.model, 1), 0);
    let (_, docs) = toy_docs(&cfg);
    assert!(eval::accuracy(&out.classifier, &docs).unwrap().value() >= 0.9);
}

#[test]
fn rejects_single_label_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.txt");
    std::fs::write(&p, "__label__a x y\n__label__a z\n").unwrap();
    assert!(optim::train(&p, &toy_config(Geometry::Euclidean)).is_err());
}

#[test]
fn radam_separates_at_paper_scale_lr() {
    for g in [Geometry::Hyperbolic, Geometry::Euclidean] {
        let cfg = TrainConfig {
            lr0: 0.05,
            epochs: 20,
            optimizer: optim::Optimizer::RiemannianAdam,
            ..toy_config(g)
        };
        let out = optim::train(&data_path("toy.txt"), &cfg).unwrap();
        let (_, docs) = toy_docs(&cfg);
        assert_eq!(eval::accuracy(&out.classifier, &docs).unwrap().value(), 1.0, "{g}");
        assert_eq!(ball_violations(&out.classifier.model, 1), 0);
    }
}
