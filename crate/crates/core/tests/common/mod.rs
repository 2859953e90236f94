//! Test helpers shared by the integration suites.
#![allow(dead_code)]

use hypertext::hypergeo::{self as geo, Curvature};
use hypertext::model::{self, Architecture, ClassifierKind, DenseParams, Geometry, Parameters, Pooling};
use hypertext::textcorpus::{Document, Gold};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Relative error is taken against `max(|analytic|, |numeric|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform point in the ball of radius `max_r` (direction uniform, radius
/// uniform).
pub fn random_ball_point(rng: &mut impl Rng, d: usize, max_r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = geo::norm(&v);
        if n > 1e-3 && n <= 1.0 {
            let r = rng.gen_range(0.0..max_r);
            return v.iter().map(|x| x / n * r).collect();
        }
    }
}

pub fn all_architectures() -> Vec<Architecture> {
    let mut out = Vec::new();
    for &c in &[0.5, 1.0, 2.0] {
        let c = Curvature::new(c).unwrap();
        for (geometry, pooling, classifier) in [
            (Geometry::Hyperbolic, Pooling::Einstein, ClassifierKind::Mobius),
            (Geometry::Euclidean, Pooling::Mean, ClassifierKind::Linear),
            (Geometry::Euclidean, Pooling::Mean, ClassifierKind::Mobius),
            (Geometry::Hyperbolic, Pooling::Mean, ClassifierKind::Mobius),
            (Geometry::Hyperbolic, Pooling::Einstein, ClassifierKind::Linear),
        ] {
            out.push(Architecture { geometry, pooling, classifier, curvature: c });
        }
    }
    out
}

pub struct Case {
    pub params: DenseParams,
    pub doc: Document,
    pub label: u32,
}

/// A random tiny model: d <= 8, n_labels <= 5, up to 6 pooled rows, plus one
/// row that the document never touches.
pub fn random_case(rng: &mut impl Rng, arch: &Architecture) -> Case {
    let d = rng.gen_range(1..=8);
    let n = rng.gen_range(2..=5);
    let k = rng.gen_range(1..=6);
    let n_rows = k + 2;
    let mut rows = Vec::with_capacity(n_rows * d);
    for _ in 0..n_rows {
        match arch.geometry {
            Geometry::Hyperbolic => rows.extend(random_ball_point(rng, d, 0.9)),
            Geometry::Euclidean => rows.extend((0..d).map(|_| rng.gen_range(-1.0..1.0))),
        }
    }
    let weights = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let bias = match arch.classifier {
        ClassifierKind::Mobius => random_ball_point(rng, n, 0.5 * arch.curvature.max_norm()),
        ClassifierKind::Linear => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    // the last row is never referenced
    let token_ids = (0..k).map(|_| rng.gen_range(0..(n_rows - 1) as u32)).collect();
    let label = rng.gen_range(0..n as u32);
    Case {
        params: DenseParams { dim: d, n_labels: n, rows, weights, bias },
        doc: Document { gold: Gold::Known(label), label_ids: vec![label], token_ids, ngram_ids: vec![] },
        label,
    }
}

fn loss_at(params: &DenseParams, doc: &Document, label: u32, arch: &Architecture) -> f64 {
    model::loss(&model::forward(doc, params, arch).unwrap(), label).unwrap()
}

fn central_difference(
    params: &mut DenseParams,
    doc: &Document,
    label: u32,
    arch: &Architecture,
    get: impl Fn(&mut DenseParams) -> &mut f64,
) -> f64 {
    let orig = *get(params);
    *get(params) = orig + FD_STEP;
    let up = loss_at(params, doc, label, arch);
    *get(params) = orig - FD_STEP;
    let down = loss_at(params, doc, label, arch);
    *get(params) = orig;
    (up - down) / (2.0 * FD_STEP)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest relative error between analytic and central-difference gradients
/// over every scalar parameter of the case.
pub fn max_gradient_error(case: &Case, arch: &Architecture) -> f64 {
    let mut p = case.params.clone();
    let trace = model::forward(&case.doc, &p, arch).unwrap();
    let grads = model::backward(&trace, case.label, &p).unwrap();
    let d = p.dim;
    let mut worst: f64 = 0.0;

    for row in 0..p.n_rows() {
        for j in 0..d {
            let num = central_difference(&mut p, &case.doc, case.label, arch, |q| &mut q.rows[row * d + j]);
            let ana = grads.row_grad(row as u32).map_or(0.0, |g| g[j]);
            worst = worst.max(rel_err(ana, num));
        }
    }
    for i in 0..p.weights.len() {
        let num = central_difference(&mut p, &case.doc, case.label, arch, |q| &mut q.weights[i]);
        worst = worst.max(rel_err(grads.weights[i], num));
    }
    for i in 0..p.bias.len() {
        let num = central_difference(&mut p, &case.doc, case.label, arch, |q| &mut q.bias[i]);
        worst = worst.max(rel_err(grads.bias[i], num));
    }
    worst
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Settings under which the 20-line toy fixture separates within 5 epochs
/// from the near-origin init.
pub fn toy_config(geometry: Geometry) -> hypertext::TrainConfig {
    hypertext::TrainConfig {
        lr0: 2.0,
        epochs: 5,
        dim: 10,
        arch: Architecture::for_geometry(geometry, Curvature::default()),
        corpus: hypertext::CorpusConfig { word_ngrams: 1, bucket: 1000, ..Default::default() },
        ..Default::default()
    }
}

/// Brute-force forward pass written directly from the model definition, with
/// no engine helpers: Klein map, Lorentz-weighted midpoint, Möbius matvec,
/// Möbius bias, softmax (hyperbolic) or mean, affine, softmax (euclidean).
/// Möbius results are projected to the clamp radius `(1 - 1e-5) min(1, 1/sqrt(c))`.
pub fn naive_probs(p: &DenseParams, token_ids: &[u32], arch: &Architecture) -> Vec<f64> {
    let d = p.dim;
    let row = |t: u32| &p.rows[t as usize * d..(t as usize + 1) * d];
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mat = |x: &[f64]| -> Vec<f64> { (0..p.n_labels).map(|i| dotp(&p.weights[i * d..(i + 1) * d], x)).collect() };
    let logits: Vec<f64> = match (arch.geometry, arch.pooling, arch.classifier) {
        (Geometry::Hyperbolic, Pooling::Einstein, ClassifierKind::Mobius) => {
            let c = arch.curvature.value();
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for &t in token_ids {
                let r = row(t);
                let r2 = dotp(r, r);
                let k: Vec<f64> = r.iter().map(|x| 2.0 * x / (1.0 + r2)).collect();
                let gamma = 1.0 / (1.0 - dotp(&k, &k)).sqrt();
                for j in 0..d {
                    num[j] += gamma * k[j];
                }
                den += gamma;
            }
            let mid: Vec<f64> = num.iter().map(|x| x / den).collect();
            let s = 1.0 + (1.0 - dotp(&mid, &mid)).sqrt();
            let x: Vec<f64> = mid.iter().map(|v| v / s).collect();
            let mx = mat(&x);
            let (nx, nmx) = (dotp(&x, &x).sqrt(), dotp(&mx, &mx).sqrt());
            let sc = c.sqrt();
            let radius = (1.0 - 1e-5) * (1.0 / sc).min(1.0);
            let clamp = |v: Vec<f64>| {
                let n = dotp(&v, &v).sqrt();
                if n > radius { v.iter().map(|x| x * radius / n).collect() } else { v }
            };
            let y: Vec<f64> = if nmx == 0.0 || nx == 0.0 {
                vec![0.0; p.n_labels]
            } else {
                let f = (nmx / nx * (sc * nx).atanh()).tanh() / (sc * nmx);
                clamp(mx.iter().map(|v| v * f).collect())
            };
            let b = &p.bias;
            let (yb, y2, b2) = (dotp(&y, b), dotp(&y, &y), dotp(b, b));
            let den = 1.0 + 2.0 * c * yb + c * c * y2 * b2;
            clamp((0..p.n_labels)
                .map(|i| ((1.0 + 2.0 * c * yb + c * b2) * y[i] + (1.0 - c * y2) * b[i]) / den)
                .collect())
        }
        (Geometry::Euclidean, Pooling::Mean, ClassifierKind::Linear) => {
            let mut x = vec![0.0; d];
            for &t in token_ids {
                for (a, v) in x.iter_mut().zip(row(t)) {
                    *a += v / token_ids.len() as f64;
                }
            }
            mat(&x).iter().zip(&p.bias).map(|(a, b)| a + b).collect()
        }
        other => panic!("naive forward covers the two main architectures, not {other:?}"),
    };
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}
pub mod agnews;
