//! Experiment harness: accuracy, learning-rate selection, embedding-dimension
//! sweeps, layer ablations and an analytic FLOPs estimate.
//!
//! # FLOPs convention
//!
//! Counts are per inference on a document that pools `k` rows, with embedding
//! dimension `d` and `n` labels. A multiply-add costs 2, any other arithmetic
//! operation 1, and each transcendental (`sqrt`, `tanh`, `atanh`, `exp`)
//! costs `T` (10 by default). Comparisons are free.
//!
//! | stage | euclidean | hyperbolic |
//! |---|---|---|
//! | per row: `\|p\|^2`, Klein map, Lorentz factor, weighted sum | `d` (sum) | `5d + 5` |
//! | pool normalisation | `d` | `d` |
//! | midpoint clamp check | | `2d + T` |
//! | Klein to Poincaré | | `d + 3 + T` |
//! | `M x` | `2nd` | `2nd` |
//! | Möbius scaling of `M x` | | `2d + 3n + 5T + 9` |
//! | product clamp check | | `2n + T` |
//! | bias | `n` | Möbius addition `10n + 11` |
//! | output clamp check | | `2n + T` |
//! | softmax | `nT + 2n` | `nT + 2n` |

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Architecture, ClassifierKind, Geometry, Pooling, TextClassifier};
use crate::optim::{self, TrainConfig};
use crate::par;
use crate::textcorpus::{self, Document, Gold, Vocab};

/// Accuracy counts over a labeled set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    /// Examples with a gold label (seen or unseen).
    pub total: usize,
    /// Examples whose gold label was never seen in training.
    pub unseen: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn score(classifier: &TextClassifier, doc: &Document) -> Result<(bool, bool, bool)> {
    match doc.gold {
        Gold::Missing => Ok((false, false, false)),
        Gold::Unseen => Ok((true, false, true)),
        Gold::Known(label) => {
            let top = model::predict(doc, &classifier.model, &classifier.model.arch, 1)?;
            Ok((true, top[0].0 == label, false))
        }
    }
}

fn tally(scores: Vec<Result<(bool, bool, bool)>>) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for s in scores {
        let (counted, correct, unseen) = s?;
        acc.total += counted as usize;
        acc.correct += correct as usize;
        acc.unseen += unseen as usize;
    }
    Ok(acc)
}

/// Top-1 accuracy; documents are scored in parallel when the `parallel`
/// feature is on.
pub fn accuracy(classifier: &TextClassifier, docs: &[Document]) -> Result<Accuracy> {
    tally(par::map(docs, |d| score(classifier, d)))
}

/// Single-threaded [`accuracy`].
pub fn accuracy_sequential(classifier: &TextClassifier, docs: &[Document]) -> Result<Accuracy> {
    tally(par::map_sequential(docs, |d| score(classifier, d)))
}

/// A training corpus and a held-out set sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub vocab: Vocab,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
}

impl Dataset {
    pub fn load(name: &str, train: &Path, test: &Path, cfg: &textcorpus::CorpusConfig) -> Result<Self> {
        let (vocab, train_docs) = optim::load_corpus(train, cfg)?;
        let test_lines = optim::read_lines(test)?;
        let test_docs = optim::documents(&test_lines, &vocab, cfg, false)?;
        Ok(Dataset { name: name.to_string(), vocab, train: train_docs, test: test_docs })
    }

    /// Splits off every `every`-th training document as a validation set.
    pub fn validation_split(&self, every: usize) -> Dataset {
        let (mut train, mut valid) = (Vec::new(), Vec::new());
        for (i, d) in self.train.iter().enumerate() {
            if i % every == every - 1 {
                valid.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
        Dataset { name: format!("{}-valid", self.name), vocab: self.vocab.clone(), train, test: valid }
    }

    pub fn mean_rows(&self) -> f64 {
        if self.test.is_empty() {
            return 1.0;
        }
        self.test.iter().map(|d| d.n_rows() as f64).sum::<f64>() / self.test.len() as f64
    }
}

/// Trains on `data.train` and measures accuracy on `data.test`.
pub fn train_and_test(data: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64, TextClassifier)> {
    let started = Instant::now();
    let out = optim::train_documents(data.vocab.clone(), &data.train, cfg)?;
    let secs = started.elapsed().as_secs_f64();
    let acc = accuracy(&out.classifier, &data.test)?;
    Ok((acc.value(), secs, out.classifier))
}

/// Accuracy for each learning rate of `grid`, and the index of the best
/// (first on ties).
pub fn select_lr(data: &Dataset, grid: &[f64], cfg: &TrainConfig) -> Result<(Vec<f64>, usize)> {
    let mut accs = Vec::with_capacity(grid.len());
    for &lr in grid {
        let (acc, _, _) = train_and_test(data, &TrainConfig { lr0: lr, ..cfg.clone() })?;
        accs.push(acc);
    }
    let best = accs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &a)| if a > accs[b] { i } else { b });
    Ok((accs, best))
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsConvention {
    pub multiply_add: f64,
    pub transcendental: f64,
}

impl Default for FlopsConvention {
    fn default() -> Self {
        FlopsConvention { multiply_add: 2.0, transcendental: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub hyper_flops: f64,
    pub euclid_flops: f64,
    pub ratio: f64,
}

/// Inference cost of one architecture, following the table in the module docs.
pub fn flops_for(arch: &Architecture, d: usize, n: usize, k: f64, conv: &FlopsConvention) -> f64 {
    let (d, n) = (d as f64, n as f64);
    let mac = conv.multiply_add;
    let t = conv.transcendental;
    let mut total = 0.0;
    total += match arch.pooling {
        Pooling::Mean => k * d + d,
        Pooling::Einstein => k * (mac * d + d + 2.0 + 2.0 + mac * d + 1.0) + d + (mac * d + t) + (d + 3.0 + t),
    };
    if arch.geometry == Geometry::Euclidean && arch.classifier == ClassifierKind::Mobius {
        // exp map at the origin and clamp check
        total += mac * d + 2.0 * t + 3.0 + d + (mac * d + t);
    }
    total += mac * n * d;
    total += match arch.classifier {
        ClassifierKind::Linear => n,
        ClassifierKind::Mobius => {
            (mac * d + 3.0 * n + 5.0 * t + 9.0) + (mac * n + t) + (10.0 * n + 11.0) + (mac * n + t)
        }
    };
    total + n * t + 2.0 * n
}

/// Per-inference FLOPs of the full hyperbolic network against the euclidean
/// baseline.
pub fn estimate_flops(d: usize, n: usize, k: f64, conv: &FlopsConvention) -> Result<FlopsEstimate> {
    if k < 1.0 {
        return Err(Error::InvalidConfig(format!("average pooled rows must be >= 1, got {k}")));
    }
    let hyper = flops_for(&Architecture::hyperbolic(Default::default()), d, n, k, conv);
    let euclid = flops_for(&Architecture::euclidean(), d, n, k, conv);
    Ok(FlopsEstimate { hyper_flops: hyper, euclid_flops: euclid, ratio: hyper / euclid })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One JSON-lines row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub geometry: String,
    pub dim: usize,
    pub pooling: String,
    pub classifier: String,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub flops_est: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// First line of every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub report: String,
    pub dataset: String,
    pub config_hash: String,
    pub flops_convention: FlopsConvention,
    /// Ablation reports only: how the "-PE&EM" variant is built.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation_convention: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub header: ReportHeader,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(|e| Error::Format(e.to_string()))?)?;
        for row in &self.rows {
            writeln!(w, "{}", serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn row(&self, geometry: Geometry, dim: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.geometry == geometry.name() && r.dim == dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub conv: FlopsConvention,
    /// Record wall-clock training time; off gives byte-reproducible reports.
    pub record_timing: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { conv: FlopsConvention::default(), record_timing: true }
    }
}

/// Stable fingerprint of a training configuration.
pub fn config_hash(cfg: &TrainConfig) -> String {
    format!("{:016x}", textcorpus::fnv1a(format!("{cfg:?}").into_bytes()))
}

fn header(kind: &str, data: &Dataset, cfg: &TrainConfig, conv: FlopsConvention) -> ReportHeader {
    ReportHeader {
        report: kind.to_string(),
        dataset: data.name.clone(),
        config_hash: config_hash(cfg),
        flops_convention: conv,
        ablation_convention: None,
    }
}

fn run_row(data: &Dataset, cfg: &TrainConfig, opts: &SweepOptions) -> SweepRow {
    let arch = cfg.arch;
    let flops = flops_for(&arch, cfg.dim, data.vocab.n_labels(), data.mean_rows().max(1.0), &opts.conv);
    let mut row = SweepRow {
        dataset: data.name.clone(),
        geometry: arch.geometry.name().into(),
        dim: cfg.dim,
        pooling: arch.pooling.name().into(),
        classifier: arch.classifier.name().into(),
        accuracy: 0.0,
        train_seconds: 0.0,
        flops_est: flops,
        error: None,
    };
    match train_and_test(data, cfg) {
        Ok((acc, secs, _)) => {
            row.accuracy = acc;
            if opts.record_timing {
                row.train_seconds = secs;
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains one model per `(geometry, dim)`; rows sorted by geometry name then
/// dim. A failed row is kept with its error message.
pub fn run_dimension_sweep(
    data: &Dataset,
    dims: &[usize],
    geometries: &[Geometry],
    base: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if dims.is_empty() || geometries.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one dim and one geometry".into()));
    }
    let mut pairs: Vec<(Geometry, usize)> =
        geometries.iter().flat_map(|&g| dims.iter().map(move |&d| (g, d))).collect();
    pairs.sort_by(|a, b| a.0.name().cmp(b.0.name()).then(a.1.cmp(&b.1)));
    pairs.dedup();
    let rows = pairs
        .into_iter()
        .map(|(g, d)| {
            let cfg = TrainConfig { dim: d, arch: Architecture::for_geometry(g, base.arch.curvature), ..base.clone() };
            run_row(data, &cfg, opts)
        })
        .collect();
    Ok(SweepReport { header: header("dimension_sweep", data, base, opts.conv), rows })
}

/// Ablation variants, in table order.
pub fn ablation_variants(base: &Architecture) -> [(&'static str, Architecture); 3] {
    let c = base.curvature;
    [
        ("full", Architecture::hyperbolic(c)),
        (
            "-PE&EM",
            Architecture {
                geometry: Geometry::Euclidean,
                pooling: Pooling::Mean,
                classifier: ClassifierKind::Mobius,
                curvature: c,
            },
        ),
        ("-ML", Architecture { curvature: c, ..Architecture::euclidean() }),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub row: SweepRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub header: ReportHeader,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(|e| Error::Format(e.to_string()))?)?;
        for row in &self.rows {
            writeln!(w, "{}", serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn accuracy(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.row.accuracy)
    }
}

/// Trains the full model, the model without Poincaré embeddings and Einstein
/// pooling (euclidean rows, mean pooling, Möbius layer kept) and the model
/// without the Möbius layer (the euclidean baseline).
pub fn run_ablations(data: &Dataset, base: &TrainConfig, opts: &SweepOptions) -> Result<AblationReport> {
    let rows = ablation_variants(&base.arch)
        .into_iter()
        .map(|(name, arch)| AblationRow {
            variant: name.to_string(),
            row: run_row(data, &TrainConfig { arch, ..base.clone() }, opts),
        })
        .collect();
    let mut h = header("ablation", data, base, opts.conv);
    h.ablation_convention = Some("-PE&EM = euclidean embedding + mean pooling + mobius classifier".into());
    Ok(AblationReport { header: h, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_ratio_above_one() {
        let conv = FlopsConvention::default();
        let e = estimate_flops(10, 4, 50.0, &conv).unwrap();
        assert!(e.ratio > 1.0);
        assert!(estimate_flops(10, 4, 0.5, &conv).is_err());
    }

    #[test]
    fn flops_hand_count() {
        // d = n = 2, k = 1, T = 10
        let conv = FlopsConvention::default();
        let e = estimate_flops(2, 2, 1.0, &conv).unwrap();
        // pool 2 + 2, affine 8, bias 2, softmax 20 + 4
        assert_eq!(e.euclid_flops, 38.0);
        // per row 15, normalise 2, clamp 14, klein->poincare 15, Mx 8,
        // scaling 4 + 6 + 50 + 9 = 69, clamp 14, mobius add 31, clamp 14,
        // softmax 24
        assert_eq!(e.hyper_flops, 15.0 + 2.0 + 14.0 + 15.0 + 8.0 + 69.0 + 14.0 + 31.0 + 14.0 + 24.0);
    }

    #[test]
    fn flops_monotone() {
        let conv = FlopsConvention::default();
        for arch in [Architecture::hyperbolic(Default::default()), Architecture::euclidean()] {
            let base = flops_for(&arch, 10, 4, 20.0, &conv);
            assert!(flops_for(&arch, 11, 4, 20.0, &conv) > base);
            assert!(flops_for(&arch, 10, 5, 20.0, &conv) > base);
            assert!(flops_for(&arch, 10, 4, 21.0, &conv) > base);
        }
    }

    #[test]
    fn ablation_variants_are_valid() {
        let v = ablation_variants(&Architecture::hyperbolic(Default::default()));
        assert_eq!(v.len(), 3);
        for (_, a) in v {
            a.validate().unwrap();
        }
        assert_eq!(v[2].1, Architecture::euclidean());
    }

    #[test]
    fn accuracy_value() {
        assert_eq!(Accuracy::default().value(), 0.0);
        assert_eq!(Accuracy { correct: 3, total: 4, unseen: 0 }.value(), 0.75);
    }
}
