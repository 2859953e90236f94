//! Training: Riemannian SGD for ball-constrained parameters, plain SGD for
//! everything else, linear learning-rate decay, per-epoch shuffling.
//! [`Optimizer::RiemannianAdam`] swaps both steps for their adaptive
//! counterparts.
//!
//! Updates are per example (batch size 1). With `threads > 1` the shuffled
//! example order is split into contiguous shards and each worker updates the
//! shared parameters without synchronisation.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypergeo::{self as geo, MAX_NORM};
use crate::model::{self, Architecture, ClassifierKind, Geometry, GradientSet, Model, Parameters, SharedVec, TextClassifier};
use crate::par;
use crate::textcorpus::{self, CorpusConfig, Document, Vocab};

/// Tokens between progress reports.
pub const PROGRESS_INTERVAL: u64 = 100_000;

/// The learning-rate grid searched for each dataset.
pub const LR_GRID: [f64; 4] = [0.001, 0.05, 0.01, 0.015];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: u32,
    pub threads: usize,
    pub seed: u64,
    pub dim: usize,
    /// Half-width of the uniform interval embedding rows start in.
    pub init_range: f64,
    pub arch: Architecture,
    pub corpus: CorpusConfig,
    pub optimizer: Optimizer,
    /// Report throughput, learning rate and loss on stderr.
    pub progress: bool,
}

/// Update rule used by [`train`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Optimizer {
    /// Riemannian SGD on ball-constrained parameters, SGD elsewhere.
    #[default]
    Rsgd,
    /// Riemannian Adam (Bécigneul and Ganea) on ball-constrained parameters,
    /// Adam elsewhere.
    RiemannianAdam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Rsgd => "rsgd",
            Optimizer::RiemannianAdam => "radam",
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsgd" | "sgd" => Ok(Optimizer::Rsgd),
            "radam" | "adam" => Ok(Optimizer::RiemannianAdam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?} (expected rsgd or radam)"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.05,
            epochs: 5,
            threads: 1,
            seed: 42,
            dim: 10,
            init_range: model::INIT_RANGE,
            arch: Architecture::hyperbolic(Default::default()),
            corpus: CorpusConfig::default(),
            optimizer: Optimizer::Rsgd,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr0)));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epoch must be >= 1".into()));
        }
        if self.threads < 1 {
            return Err(Error::InvalidConfig("thread must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        self.arch.validate()?;
        model::check_init_range(self.init_range, self.dim, &self.arch)?;
        self.corpus.validate()
    }
}

/// Progress through the token budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub lr0: f64,
    pub tokens_processed: u64,
    pub total_token_budget: u64,
}

/// `lr0 * max(0, 1 - processed / budget)`.
pub fn lr_at(state: &TrainState) -> f64 {
    let progress = state.tokens_processed as f64 / state.total_token_budget.max(1) as f64;
    state.lr0 * (1.0 - progress).max(0.0)
}

/// One SGD step. Ball-constrained parameters (hyperbolic rows; the bias of a
/// Möbius layer) take a Riemannian step followed by the projected retraction.
pub fn apply_gradients(model: &Model, grads: &GradientSet, lr: f64, example: usize) -> Result<()> {
    if grads.dim != model.dim() || grads.weights.len() != model.out.weights().len() || grads.bias.len() != model.n_labels() {
        return Err(Error::StaleTrace);
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { example });
    }
    let d = grads.dim;
    let arch = &model.arch;
    let mut row = vec![0.0; d];
    let mut step = vec![0.0; d];
    for (i, &id) in grads.row_ids.iter().enumerate() {
        model.emb.read_row(id, &mut row);
        step.copy_from_slice(&grads.row_grads[i * d..(i + 1) * d]);
        match arch.geometry {
            Geometry::Hyperbolic => {
                geo::riemannian_scale_in_place(&row, &mut step, 1.0);
                geo::retract_in_place(&mut row, &step, lr, MAX_NORM);
            }
            Geometry::Euclidean => row.iter_mut().zip(&step).for_each(|(r, g)| *r -= lr * g),
        }
        model.emb.write_row(id, &row, arch.row_radius());
    }

    let weights = model.out.weights();
    for (j, g) in grads.weights.iter().enumerate() {
        if *g != 0.0 {
            weights.set(j, (f64::from(weights.get(j)) - lr * g) as f32);
        }
    }

    let n = model.n_labels();
    let mut bias = vec![0.0; n];
    model.read_bias(&mut bias);
    match arch.classifier {
        ClassifierKind::Mobius => {
            let c = arch.curvature.value();
            let mut g = grads.bias.clone();
            geo::riemannian_scale_in_place(&bias, &mut g, c);
            geo::retract_in_place(&mut bias, &g, lr, arch.curvature.max_norm());
        }
        ClassifierKind::Linear => bias.iter_mut().zip(&grads.bias).for_each(|(b, g)| *b -= lr * g),
    }
    model.out.bias().write_from(0, &bias, arch.bias_radius());
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for [`apply_adam`], shared between workers like the
/// parameters themselves.
///
/// Each hyperbolic row and the Möbius bias is one manifold component with a
/// scalar second moment (the squared Riemannian norm of its gradient);
/// Euclidean parameters keep one per coordinate. Rows are updated lazily, so
/// every row counts its own steps for bias correction.
#[derive(Debug)]
pub struct AdamState {
    row_m: SharedVec,
    row_v: SharedVec,
    row_t: SharedVec,
    w_m: SharedVec,
    w_v: SharedVec,
    b_m: SharedVec,
    b_v: SharedVec,
    out_t: SharedVec,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let (rows, d, n) = (model.n_rows(), model.dim(), model.n_labels());
        AdamState {
            row_m: SharedVec::zeros(rows * d),
            row_v: SharedVec::zeros(rows * d),
            row_t: SharedVec::zeros(rows),
            w_m: SharedVec::zeros(n * d),
            w_v: SharedVec::zeros(n * d),
            b_m: SharedVec::zeros(n),
            b_v: SharedVec::zeros(n),
            out_t: SharedVec::zeros(1),
        }
    }
}

/// Scratch buffers for one Adam component.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new() -> Self {
        Moments { m: Vec::new(), v: Vec::new() }
    }

    fn load(&mut self, m: &SharedVec, v: &SharedVec, offset: usize, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
        m.read_into(offset, &mut self.m);
        v.read_into(offset, &mut self.v);
    }

    fn store(&self, m: &SharedVec, v: &SharedVec, offset: usize) {
        m.write_from(offset, &self.m, None);
        v.write_from(offset, &self.v, None);
    }
}

/// Riemannian Adam step on a ball component `x` of curvature `c` with
/// Euclidean gradient `g`; `x` is retracted into the ball of radius `max`.
fn radam_ball_step(x: &mut [f64], g: &[f64], mo: &mut Moments, t: f64, lr: f64, c: f64, max: f64) {
    let lambda = geo::conformal_factor_c(x, c);
    let inv2 = 1.0 / (lambda * lambda);
    // |grad_R|_x^2 = lambda^2 |g / lambda^2|^2
    let norm2 = geo::sq_norm(g) * inv2;
    mo.v[0] = ADAM_BETA2 * mo.v[0] + (1.0 - ADAM_BETA2) * norm2;
    let v_hat = mo.v[0] / (1.0 - ADAM_BETA2.powf(t));
    let denom = v_hat.sqrt() + ADAM_EPS;
    let m_corr = 1.0 - ADAM_BETA1.powf(t);
    let mut step = vec![0.0; x.len()];
    for ((s, m), gi) in step.iter_mut().zip(mo.m.iter_mut()).zip(g) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi * inv2;
        *s = *m / m_corr / denom;
    }
    geo::retract_in_place(x, &step, lr, max);
}

fn adam_step(x: &mut [f64], g: &[f64], mo: &mut Moments, t: f64, lr: f64) {
    let (m_corr, v_corr) = (1.0 - ADAM_BETA1.powf(t), 1.0 - ADAM_BETA2.powf(t));
    for (i, xi) in x.iter_mut().enumerate() {
        mo.m[i] = ADAM_BETA1 * mo.m[i] + (1.0 - ADAM_BETA1) * g[i];
        mo.v[i] = ADAM_BETA2 * mo.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        *xi -= lr * (mo.m[i] / m_corr) / ((mo.v[i] / v_corr).sqrt() + ADAM_EPS);
    }
}

/// One adaptive step: Riemannian Adam for hyperbolic rows and the Möbius
/// bias, Adam for everything else. Only touched rows change.
pub fn apply_adam(model: &Model, state: &AdamState, grads: &GradientSet, lr: f64, example: usize) -> Result<()> {
    if grads.dim != model.dim() || grads.weights.len() != model.out.weights().len() || grads.bias.len() != model.n_labels() {
        return Err(Error::StaleTrace);
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { example });
    }
    let d = grads.dim;
    let arch = &model.arch;
    let mut row = vec![0.0; d];
    let mut mo = Moments::new();
    for (i, &id) in grads.row_ids.iter().enumerate() {
        let g = &grads.row_grads[i * d..(i + 1) * d];
        let off = id as usize * d;
        let t = f64::from(state.row_t.get(id as usize)) + 1.0;
        state.row_t.set(id as usize, t as f32);
        model.emb.read_row(id, &mut row);
        mo.load(&state.row_m, &state.row_v, off, d);
        match arch.geometry {
            Geometry::Hyperbolic => radam_ball_step(&mut row, g, &mut mo, t, lr, 1.0, MAX_NORM),
            Geometry::Euclidean => adam_step(&mut row, g, &mut mo, t, lr),
        }
        mo.store(&state.row_m, &state.row_v, off);
        model.emb.write_row(id, &row, arch.row_radius());
    }

    let t = f64::from(state.out_t.get(0)) + 1.0;
    state.out_t.set(0, t as f32);
    let weights = model.out.weights();
    let mut w = vec![0.0; weights.len()];
    weights.read_into(0, &mut w);
    mo.load(&state.w_m, &state.w_v, 0, w.len());
    adam_step(&mut w, &grads.weights, &mut mo, t, lr);
    mo.store(&state.w_m, &state.w_v, 0);
    weights.write_from(0, &w, None);

    let n = model.n_labels();
    let mut bias = vec![0.0; n];
    model.read_bias(&mut bias);
    mo.load(&state.b_m, &state.b_v, 0, n);
    match arch.classifier {
        ClassifierKind::Mobius => {
            let c = arch.curvature;
            radam_ball_step(&mut bias, &grads.bias, &mut mo, t, lr, c.value(), c.max_norm())
        }
        ClassifierKind::Linear => adam_step(&mut bias, &grads.bias, &mut mo, t, lr),
    }
    mo.store(&state.b_m, &state.b_v, 0);
    model.out.bias().write_from(0, &bias, arch.bias_radius());
    Ok(())
}

/// Reads a labeled corpus and builds its vocabulary and documents.
pub fn load_corpus(path: &Path, cfg: &CorpusConfig) -> Result<(Vocab, Vec<Document>)> {
    let lines = read_lines(path)?;
    let vocab = textcorpus::build_vocab(&lines, cfg)?;
    let docs = documents(&lines, &vocab, cfg, true)?;
    Ok((vocab, docs))
}

/// Converts lines to documents against an existing vocabulary. Blank lines are
/// skipped.
pub fn documents<S: AsRef<str>>(lines: &[S], vocab: &Vocab, cfg: &CorpusConfig, require_label: bool) -> Result<Vec<Document>> {
    let mut docs = Vec::with_capacity(lines.len());
    for (no, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        let parsed = textcorpus::parse_labeled_line(line, cfg, require_label, no + 1)?;
        docs.push(vocab.document(&parsed, cfg));
    }
    Ok(docs)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().collect::<std::io::Result<Vec<_>>>()?)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub classifier: TextClassifier,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains on the labeled corpus at `path`.
pub fn train(path: &Path, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let (vocab, docs) = load_corpus(path, &cfg.corpus)?;
    train_documents(vocab, &docs, cfg)
}

/// Trains on pre-built documents.
pub fn train_documents(vocab: Vocab, docs: &[Document], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if vocab.n_labels() < 2 {
        return Err(Error::InvalidConfig(format!("training needs at least 2 labels, found {}", vocab.n_labels())));
    }
    let model = model::init_model(&vocab, &cfg.corpus, cfg.dim, cfg.arch, cfg.init_range, cfg.seed)?;
    let labeled: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].label().is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let epoch_tokens: u64 = labeled.iter().map(|&i| docs[i].token_ids.len() as u64).sum();
    let budget = (epoch_tokens * u64::from(cfg.epochs)).max(1);
    let adam = (cfg.optimizer == Optimizer::RiemannianAdam).then(|| AdamState::new(&model));
    let tokens = AtomicU64::new(0);
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = labeled;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);

    let workers = if par::ENABLED { cfg.threads.min(order.len()).max(1) } else { 1 };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let shard = order.len().div_ceil(workers);
        let results = par::run_workers(workers, |w| {
            let lo = (w * shard).min(order.len());
            let hi = ((w + 1) * shard).min(order.len());
            run_shard(&model, adam.as_ref(), docs, &order[lo..hi], cfg, budget, &tokens, started)
        });
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in results {
            let (s, c) = r?;
            sum += s;
            count += c;
        }
        epoch_losses.push(sum / count as f64);
        #[cfg(debug_assertions)]
        debug_assert_eq!(ball_violations(&model, 997), 0);
    }

    let final_loss = *epoch_losses.last().expect("epochs >= 1");
    Ok(TrainOutput {
        classifier: TextClassifier { vocab, corpus: cfg.corpus.clone(), model },
        final_loss,
        epoch_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_shard(
    model: &Model,
    adam: Option<&AdamState>,
    docs: &[Document],
    shard: &[usize],
    cfg: &TrainConfig,
    budget: u64,
    tokens: &AtomicU64,
    started: Instant,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut window_loss = 0.0;
    let mut window_count = 0usize;
    for &idx in shard {
        let doc = &docs[idx];
        let label = doc.label().expect("training documents are labeled");
        let n_tok = doc.token_ids.len() as u64;
        let processed = tokens.fetch_add(n_tok, Ordering::Relaxed);
        let lr = lr_at(&TrainState { lr0: cfg.lr0, tokens_processed: processed, total_token_budget: budget });

        let trace = model::forward(doc, model, &model.arch)?;
        let l = model::loss(&trace, label)?;
        let grads = model::backward(&trace, label, model)?;
        match adam {
            Some(state) => apply_adam(model, state, &grads, lr, idx)?,
            None => apply_gradients(model, &grads, lr, idx)?,
        }
        sum += l;
        window_loss += l;
        window_count += 1;

        if cfg.progress && (processed + n_tok) / PROGRESS_INTERVAL > processed / PROGRESS_INTERVAL {
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            eprintln!(
                "progress: {:5.1}%  words/sec: {:10.0}  lr: {:.6}  loss: {:.6}",
                100.0 * (processed + n_tok) as f64 / budget as f64,
                (processed + n_tok) as f64 / secs,
                lr,
                window_loss / window_count as f64,
            );
            window_loss = 0.0;
            window_count = 0;
        }
    }
    Ok((sum, shard.len()))
}

/// Counts ball-constrained rows (every `stride`-th row) and bias vectors
/// outside their clamp radius.
pub fn ball_violations(model: &Model, stride: usize) -> usize {
    let mut bad = 0;
    if let Some(r) = model.arch.row_radius() {
        let mut row = vec![0.0; model.dim()];
        for id in (0..model.n_rows()).step_by(stride.max(1)) {
            model.emb.read_row(id as u32, &mut row);
            if geo::norm(&row) > r {
                bad += 1;
            }
        }
    }
    if let Some(r) = model.arch.bias_radius() {
        let mut b = vec![0.0; model.n_labels()];
        model.read_bias(&mut b);
        if geo::norm(&b) > r {
            bad += 1;
        }
    }
    bad
}
