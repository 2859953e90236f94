//! The classifier network: embedding lookup, pooling, output layer, softmax.
//!
//! Two families of layers are supported and can be mixed for ablations:
//!
//! * hyperbolic: Poincaré-ball embedding rows, Einstein-midpoint pooling done
//!   in the Klein model, and a Möbius linear layer `o = M (x) m (+) b`;
//! * euclidean: unconstrained rows, mean pooling, and `o = M m + b`.
//!
//! Parameters are stored as `f32` behind relaxed atomics so that several
//! training workers can update them without locks. All arithmetic in the
//! forward and backward passes runs in `f64`; [`DenseParams`] keeps a full
//! `f64` copy for gradient checking.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypergeo::{self as geo, Curvature, MAX_NORM};
use crate::textcorpus::{self, CorpusConfig, Document, Vocab};

/// Half-width of the uniform initialisation interval for embedding rows.
pub const INIT_RANGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Hyperbolic,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Einstein,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Mobius,
    Linear,
}

macro_rules! tag_enum {
    ($ty:ident { $($variant:ident => $name:literal = $code:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }

            pub fn code(self) -> u8 {
                match self { $($ty::$variant => $code),+ }
            }

            pub fn from_code(code: u8) -> Option<Self> {
                match code { $($code => Some($ty::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }
    };
}

tag_enum!(Geometry { Hyperbolic => "hyperbolic" = 0, Euclidean => "euclidean" = 1 });
tag_enum!(Pooling { Einstein => "einstein" = 0, Mean => "mean" = 1 });
tag_enum!(ClassifierKind { Mobius => "mobius" = 0, Linear => "linear" = 1 });

/// Which layer family each stage of the network uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub geometry: Geometry,
    pub pooling: Pooling,
    pub classifier: ClassifierKind,
    pub curvature: Curvature,
}

impl Architecture {
    /// Poincaré embeddings, Einstein midpoint, Möbius linear layer.
    pub fn hyperbolic(curvature: Curvature) -> Self {
        Architecture {
            geometry: Geometry::Hyperbolic,
            pooling: Pooling::Einstein,
            classifier: ClassifierKind::Mobius,
            curvature,
        }
    }

    /// The fastText baseline.
    pub fn euclidean() -> Self {
        Architecture {
            geometry: Geometry::Euclidean,
            pooling: Pooling::Mean,
            classifier: ClassifierKind::Linear,
            curvature: Curvature::default(),
        }
    }

    /// Default pooling and classifier for a geometry.
    pub fn for_geometry(geometry: Geometry, curvature: Curvature) -> Self {
        match geometry {
            Geometry::Hyperbolic => Self::hyperbolic(curvature),
            Geometry::Euclidean => Architecture { curvature, ..Self::euclidean() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry == Geometry::Euclidean && self.pooling == Pooling::Einstein {
            return Err(Error::InvalidConfig(
                "einstein pooling requires hyperbolic embeddings".into(),
            ));
        }
        Ok(())
    }

    /// Pooled euclidean vectors are mapped into the ball before a Möbius layer.
    fn bridges_into_ball(&self) -> bool {
        self.geometry == Geometry::Euclidean && self.classifier == ClassifierKind::Mobius
    }

    /// Clamp radius for the bias vector, if it is ball-constrained.
    pub fn bias_radius(&self) -> Option<f64> {
        match self.classifier {
            ClassifierKind::Mobius => Some(self.curvature.max_norm()),
            ClassifierKind::Linear => None,
        }
    }

    /// Clamp radius for embedding rows, if they are ball-constrained.
    pub fn row_radius(&self) -> Option<f64> {
        match self.geometry {
            Geometry::Hyperbolic => Some(MAX_NORM),
            Geometry::Euclidean => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------------

/// A vector of `f32` that many threads may read and write without locks.
///
/// Loads and stores are `Relaxed`: concurrent writers may interleave at
/// element granularity, which is exactly the hogwild contract.
pub struct SharedVec(Box<[AtomicU32]>);

impl SharedVec {
    pub fn zeros(len: usize) -> Self {
        SharedVec((0..len).map(|_| AtomicU32::new(0)).collect())
    }

    pub fn from_f32(values: &[f32]) -> Self {
        SharedVec(values.iter().map(|v| AtomicU32::new(v.to_bits())).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        f32::from_bits(self.0[i].load(Ordering::Relaxed))
    }

    #[inline]
    pub fn set(&self, i: usize, v: f32) {
        self.0[i].store(v.to_bits(), Ordering::Relaxed)
    }

    pub fn read_into(&self, offset: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = f64::from(self.get(offset + j));
        }
    }

    /// Stores `values` rounded to `f32`. With a radius, the rounded vector is
    /// guaranteed to stay within it.
    pub fn write_from(&self, offset: usize, values: &[f64], radius: Option<f64>) {
        let mut scale = 1.0f64;
        loop {
            let rounded = values.iter().map(|v| (v * scale) as f32);
            match radius {
                Some(r) if rounded.clone().map(|v| f64::from(v).powi(2)).sum::<f64>().sqrt() > r => {
                    scale *= 1.0 - 1e-7;
                }
                _ => {
                    for (j, v) in rounded.enumerate() {
                        self.set(offset + j, v);
                    }
                    return;
                }
            }
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl Clone for SharedVec {
    fn clone(&self) -> Self {
        SharedVec::from_f32(&self.to_vec())
    }
}

impl fmt::Debug for SharedVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SharedVec(len={})", self.len())
    }
}

impl PartialEq for SharedVec {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && (0..self.len()).all(|i| self.0[i].load(Ordering::Relaxed) == other.0[i].load(Ordering::Relaxed))
    }
}

/// `(n_words + bucket) x d` row-major embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: SharedVec,
}

impl EmbeddingTable {
    pub fn from_f32(rows: usize, dim: usize, data: &[f32]) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch { expected: rows * dim, found: data.len() });
        }
        Ok(EmbeddingTable { rows, dim, data: SharedVec::from_f32(data) })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &SharedVec {
        &self.data
    }

    #[inline]
    pub fn read_row(&self, id: u32, out: &mut [f64]) {
        self.data.read_into(id as usize * self.dim, out);
    }

    #[inline]
    pub fn write_row(&self, id: u32, values: &[f64], radius: Option<f64>) {
        self.data.write_from(id as usize * self.dim, values, radius);
    }
}

/// `n_labels x d` weight matrix and `n_labels` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    n_labels: usize,
    dim: usize,
    weights: SharedVec,
    bias: SharedVec,
}

impl OutputLayer {
    pub fn zeros(n_labels: usize, dim: usize) -> Self {
        OutputLayer {
            n_labels,
            dim,
            weights: SharedVec::zeros(n_labels * dim),
            bias: SharedVec::zeros(n_labels),
        }
    }

    pub fn from_f32(n_labels: usize, dim: usize, weights: &[f32], bias: &[f32]) -> Result<Self> {
        if weights.len() != n_labels * dim {
            return Err(Error::DimensionMismatch { expected: n_labels * dim, found: weights.len() });
        }
        if bias.len() != n_labels {
            return Err(Error::DimensionMismatch { expected: n_labels, found: bias.len() });
        }
        Ok(OutputLayer {
            n_labels,
            dim,
            weights: SharedVec::from_f32(weights),
            bias: SharedVec::from_f32(bias),
        })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &SharedVec {
        &self.weights
    }

    pub fn bias(&self) -> &SharedVec {
        &self.bias
    }
}

/// Read access to network parameters in `f64`.
pub trait Parameters {
    fn dim(&self) -> usize;
    fn n_labels(&self) -> usize;
    fn n_rows(&self) -> usize;
    fn read_row(&self, id: u32, out: &mut [f64]);
    /// Row-major `n_labels x dim`.
    fn read_weights(&self, out: &mut [f64]);
    fn read_bias(&self, out: &mut [f64]);
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub emb: EmbeddingTable,
    pub out: OutputLayer,
}

impl Model {
    pub fn new(arch: Architecture, emb: EmbeddingTable, out: OutputLayer) -> Result<Self> {
        arch.validate()?;
        if emb.dim() != out.dim() {
            return Err(Error::DimensionMismatch { expected: emb.dim(), found: out.dim() });
        }
        Ok(Model { arch, emb, out })
    }
}

impl Parameters for Model {
    fn dim(&self) -> usize {
        self.emb.dim
    }

    fn n_labels(&self) -> usize {
        self.out.n_labels
    }

    fn n_rows(&self) -> usize {
        self.emb.rows
    }

    #[inline]
    fn read_row(&self, id: u32, out: &mut [f64]) {
        self.emb.read_row(id, out)
    }

    fn read_weights(&self, out: &mut [f64]) {
        self.out.weights.read_into(0, out)
    }

    fn read_bias(&self, out: &mut [f64]) {
        self.out.bias.read_into(0, out)
    }
}

/// Parameters held entirely in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub dim: usize,
    pub n_labels: usize,
    pub rows: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn from_model(model: &Model) -> Self {
        let to64 = |v: &SharedVec| v.to_vec().into_iter().map(f64::from).collect::<Vec<_>>();
        DenseParams {
            dim: model.dim(),
            n_labels: model.n_labels(),
            rows: to64(&model.emb.data),
            weights: to64(&model.out.weights),
            bias: to64(&model.out.bias),
        }
    }
}

impl Parameters for DenseParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    fn read_row(&self, id: u32, out: &mut [f64]) {
        let s = id as usize * self.dim;
        out.copy_from_slice(&self.rows[s..s + self.dim]);
    }

    fn read_weights(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.weights)
    }

    fn read_bias(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.bias)
    }
}

/// Initialises rows uniformly in `[-init_range, init_range]^d` and the output
/// layer to zero.
pub fn init_model(
    vocab: &Vocab,
    cfg: &CorpusConfig,
    dim: usize,
    arch: Architecture,
    init_range: f64,
    seed: u64,
) -> Result<Model> {
    if dim == 0 {
        return Err(Error::InvalidConfig("dim must be >= 1".into()));
    }
    check_init_range(init_range, dim, &arch)?;
    if vocab.n_labels() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let rows = vocab.n_words() + cfg.bucket as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = init_range as f32;
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.gen_range(-range..=range)).collect();
    let emb = EmbeddingTable::from_f32(rows, dim, &data)?;
    Model::new(arch, emb, OutputLayer::zeros(vocab.n_labels(), dim))
}

/// Rejects ranges that are not positive or, for ball-constrained rows, whose
/// corners `init_range * sqrt(d)` leave the ball.
pub fn check_init_range(init_range: f64, dim: usize, arch: &Architecture) -> Result<()> {
    if !(init_range.is_finite() && init_range > 0.0) {
        return Err(Error::InvalidConfig(format!("init range must be positive, got {init_range}")));
    }
    if let Some(r) = arch.row_radius() {
        if (init_range as f32) as f64 * (dim as f64).sqrt() >= r {
            return Err(Error::InvalidConfig(format!(
                "init range {init_range} can place {dim}-dimensional rows outside the ball"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub arch: Architecture,
    pub dim: usize,
    pub n_labels: usize,
    /// Embedding rows pooled, in document order (duplicates kept).
    pub row_ids: Vec<u32>,
    /// Looked-up rows, `k x dim`.
    pub inputs: Vec<f64>,
    /// Klein images of the rows (Einstein pooling only).
    pub klein: Vec<f64>,
    /// Lorentz factors (Einstein pooling only).
    pub gammas: Vec<f64>,
    /// Pooled vector before clamping: the raw Klein midpoint, or the mean.
    pub pooled_raw: Vec<f64>,
    /// Clamped Klein midpoint (Einstein pooling only).
    pub midpoint_klein: Vec<f64>,
    /// Input to the output layer.
    pub pooled: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `M x` (Möbius layer only).
    pub matvec: Vec<f64>,
    /// Möbius product before clamping (Möbius layer only).
    pub product_raw: Vec<f64>,
    /// Clamped Möbius product (Möbius layer only).
    pub product: Vec<f64>,
    /// Output before clamping.
    pub logits_raw: Vec<f64>,
    /// Softmax input `o`.
    pub logits: Vec<f64>,
    pub log_normalizer: f64,
    pub probs: Vec<f64>,
}

/// Runs the network selected by `arch` on one document.
pub fn forward<P: Parameters + ?Sized>(doc: &Document, params: &P, arch: &Architecture) -> Result<ForwardTrace> {
    let d = params.dim();
    let n = params.n_labels();
    let n_rows = params.n_rows();
    let c = arch.curvature.value();

    let row_ids: Vec<u32> = doc.rows().collect();
    if let Some(&bad) = row_ids.iter().find(|&&id| id as usize >= n_rows) {
        return Err(Error::DimensionMismatch { expected: n_rows, found: bad as usize + 1 });
    }
    let k = row_ids.len();
    let mut inputs = vec![0.0; k * d];
    for (chunk, &id) in inputs.chunks_exact_mut(d).zip(&row_ids) {
        params.read_row(id, chunk);
    }

    let mut klein = Vec::new();
    let mut gammas = Vec::new();
    let mut pooled_raw = vec![0.0; d];
    let mut midpoint_klein = Vec::new();
    let mut pooled = vec![0.0; d];

    if k > 0 {
        match arch.pooling {
            Pooling::Einstein => {
                klein = vec![0.0; k * d];
                gammas = Vec::with_capacity(k);
                let mut total = 0.0;
                for (p, kk) in inputs.chunks_exact(d).zip(klein.chunks_exact_mut(d)) {
                    geo::poincare_to_klein_into(p, kk);
                    let g = geo::lorentz_factor_of_poincare(p);
                    gammas.push(g);
                    total += g;
                    pooled_raw.iter_mut().zip(kk.iter()).for_each(|(a, v)| *a += g * v);
                }
                pooled_raw.iter_mut().for_each(|a| *a /= total);
                midpoint_klein = pooled_raw.clone();
                geo::project_in_place(&mut midpoint_klein, MAX_NORM);
                geo::klein_to_poincare_into(&midpoint_klein, &mut pooled);
            }
            Pooling::Mean => {
                for row in inputs.chunks_exact(d) {
                    pooled_raw.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                pooled_raw.iter_mut().for_each(|a| *a /= k as f64);
                if arch.bridges_into_ball() {
                    let (phi, _) = geo::tanh_ratio(c * geo::sq_norm(&pooled_raw));
                    pooled.iter_mut().zip(&pooled_raw).for_each(|(p, u)| *p = phi * u);
                    geo::project_in_place(&mut pooled, arch.curvature.max_norm());
                } else {
                    pooled.copy_from_slice(&pooled_raw);
                }
            }
        }
    }

    let mut weights = vec![0.0; n * d];
    params.read_weights(&mut weights);
    let mut bias = vec![0.0; n];
    params.read_bias(&mut bias);

    let mut matvec = Vec::new();
    let mut product_raw = Vec::new();
    let mut product = Vec::new();
    let mut logits_raw = vec![0.0; n];
    let mut logits;
    match arch.classifier {
        ClassifierKind::Mobius => {
            matvec = vec![0.0; n];
            geo::matvec_into(&weights, &pooled, &mut matvec);
            product_raw = vec![0.0; n];
            geo::mobius_matvec_into(&weights, &pooled, c, &mut product_raw);
            product = product_raw.clone();
            geo::project_in_place(&mut product, arch.curvature.max_norm());
            geo::mobius_add_into(&product, &bias, c, &mut logits_raw);
            logits = logits_raw.clone();
            geo::project_in_place(&mut logits, arch.curvature.max_norm());
        }
        ClassifierKind::Linear => {
            geo::matvec_into(&weights, &pooled, &mut logits_raw);
            logits_raw.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
            logits = logits_raw.clone();
        }
    }

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|o| (o - max).exp()).sum();
    let log_normalizer = max + sum.ln();
    let probs = logits.iter().map(|o| (o - log_normalizer).exp()).collect();

    Ok(ForwardTrace {
        arch: *arch,
        dim: d,
        n_labels: n,
        row_ids,
        inputs,
        klein,
        gammas,
        pooled_raw,
        midpoint_klein,
        pooled,
        weights,
        bias,
        matvec,
        product_raw,
        product,
        logits_raw,
        logits,
        log_normalizer,
        probs,
    })
}

/// Poincaré embeddings, Einstein midpoint, Möbius linear layer.
pub fn forward_hyper(doc: &Document, model: &Model) -> Result<ForwardTrace> {
    if model.arch.geometry != Geometry::Hyperbolic || model.arch.classifier != ClassifierKind::Mobius {
        return Err(Error::InvalidConfig("forward_hyper needs a hyperbolic model with a Möbius layer".into()));
    }
    forward(doc, model, &model.arch)
}

/// Mean pooling and an affine layer: the fastText network.
pub fn forward_euclid(doc: &Document, model: &Model) -> Result<ForwardTrace> {
    if model.arch.geometry != Geometry::Euclidean || model.arch.classifier != ClassifierKind::Linear {
        return Err(Error::InvalidConfig("forward_euclid needs a euclidean model with a linear layer".into()));
    }
    forward(doc, model, &model.arch)
}

/// Cross-entropy `-log p[label]` of a single example.
pub fn loss(trace: &ForwardTrace, label: u32) -> Result<f64> {
    let l = label as usize;
    if l >= trace.n_labels {
        return Err(Error::InvalidLabel { label: l, n_labels: trace.n_labels });
    }
    Ok(trace.log_normalizer - trace.logits[l])
}

/// Top-`k` labels by probability; ties go to the lower label id.
pub fn top_k(probs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut ranked: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.max(1));
    ranked
}

pub fn predict<P: Parameters + ?Sized>(doc: &Document, params: &P, arch: &Architecture, k: usize) -> Result<Vec<(u32, f64)>> {
    Ok(top_k(&forward(doc, params, arch)?.probs, k))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Euclidean gradients of the single-example loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub dim: usize,
    /// Distinct embedding rows touched by the document, ascending.
    pub row_ids: Vec<u32>,
    /// `row_ids.len() x dim`, aligned with `row_ids`.
    pub row_grads: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradientSet {
    pub fn row_grad(&self, id: u32) -> Option<&[f64]> {
        self.row_ids
            .binary_search(&id)
            .ok()
            .map(|i| &self.row_grads[i * self.dim..(i + 1) * self.dim])
    }

    pub fn is_finite(&self) -> bool {
        self.row_grads.iter().chain(&self.weights).chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Vector-Jacobian product of the radial clamp `v -> max v / |v|`.
fn clamp_vjp(raw: &[f64], grad: &mut [f64], max: f64) {
    let n = geo::norm(raw);
    if n <= max {
        return;
    }
    let proj = geo::dot(raw, grad) / (n * n);
    let s = max / n;
    grad.iter_mut().zip(raw).for_each(|(g, r)| *g = s * (*g - proj * r));
}

/// Computes gradients for every parameter from a trace produced by [`forward`].
pub fn backward<P: Parameters + ?Sized>(trace: &ForwardTrace, label: u32, params: &P) -> Result<GradientSet> {
    if trace.dim != params.dim() || trace.n_labels != params.n_labels() {
        return Err(Error::StaleTrace);
    }
    let l = label as usize;
    if l >= trace.n_labels {
        return Err(Error::InvalidLabel { label: l, n_labels: trace.n_labels });
    }
    let d = trace.dim;
    let n = trace.n_labels;
    let arch = &trace.arch;
    let c = arch.curvature.value();
    let radius = arch.curvature.max_norm();
    let x = &trace.pooled;

    // softmax + cross-entropy
    let mut g_o: Vec<f64> = trace.probs.clone();
    g_o[l] -= 1.0;

    let mut g_weights = vec![0.0; n * d];
    let g_bias;
    let mut g_x = vec![0.0; d];

    match arch.classifier {
        ClassifierKind::Linear => {
            for (i, &go) in g_o.iter().enumerate() {
                let row = &trace.weights[i * d..(i + 1) * d];
                for j in 0..d {
                    g_weights[i * d + j] = go * x[j];
                    g_x[j] += go * row[j];
                }
            }
            g_bias = g_o;
        }
        ClassifierKind::Mobius => {
            // o = clamp(f (+) b)
            let mut g_raw = g_o;
            clamp_vjp(&trace.logits_raw, &mut g_raw, radius);
            let (g_f, gb) = mobius_add_vjp(&trace.product, &trace.bias, c, &g_raw);
            g_bias = gb;
            // f = clamp(f_raw)
            let mut g_f = g_f;
            clamp_vjp(&trace.product_raw, &mut g_f, radius);
            // f_raw = (h / sqrt c) phi(T) u,  T = |u|^2 h^2,  h = H(|x|^2),  u = M x
            let u = &trace.matvec;
            let q = geo::sq_norm(x);
            let s2 = geo::sq_norm(u);
            let mut g_u = vec![0.0; n];
            if q > 0.0 && s2 > 0.0 {
                let sc = c.sqrt();
                let (h, dh) = geo::atanh_ratio(q, c);
                let (phi, dphi) = geo::tanh_ratio(s2 * h * h);
                let a = geo::dot(&g_f, u);
                let g_t = h / sc * dphi * a;
                let g_h = phi / sc * a + g_t * 2.0 * h * s2;
                let g_q = g_h * dh;
                for (gu, (gf, ui)) in g_u.iter_mut().zip(g_f.iter().zip(u)) {
                    *gu = h / sc * phi * gf + g_t * 2.0 * h * h * ui;
                }
                g_x.iter_mut().zip(x).for_each(|(gx, xi)| *gx += 2.0 * g_q * xi);
            } else if s2 == 0.0 && q > 0.0 {
                // f is linear in u near u = 0 with slope h / sqrt c
                let (h, _) = geo::atanh_ratio(q, c);
                let s = h / c.sqrt();
                g_u.iter_mut().zip(&g_f).for_each(|(gu, gf)| *gu = s * gf);
            } else {
                // near x = 0, f = M x
                g_u.copy_from_slice(&g_f);
            }
            for (i, &gu) in g_u.iter().enumerate() {
                let row = &trace.weights[i * d..(i + 1) * d];
                for j in 0..d {
                    g_weights[i * d + j] = gu * x[j];
                    g_x[j] += gu * row[j];
                }
            }
        }
    }

    let k = trace.row_ids.len();
    let mut per_position = vec![0.0; k * d];
    if k > 0 {
        match arch.pooling {
            Pooling::Mean => {
                let mut g_u = g_x;
                if arch.bridges_into_ball() {
                    clamp_vjp_exp(&trace.pooled_raw, &mut g_u, c, radius);
                }
                let inv = 1.0 / k as f64;
                for chunk in per_position.chunks_exact_mut(d) {
                    chunk.iter_mut().zip(&g_u).for_each(|(p, g)| *p = g * inv);
                }
            }
            Pooling::Einstein => {
                // pooled = k2p(clamp(m_raw))
                let m = &trace.midpoint_klein;
                let s = (1.0 - geo::sq_norm(m)).max(0.0).sqrt();
                let mg = geo::dot(m, &g_x);
                let mut g_m: Vec<f64> = g_x
                    .iter()
                    .zip(m)
                    .map(|(g, mi)| g / (1.0 + s) + mi * mg / (s * (1.0 + s) * (1.0 + s)))
                    .collect();
                clamp_vjp(&trace.pooled_raw, &mut g_m, MAX_NORM);
                let m_raw = &trace.pooled_raw;
                let total: f64 = trace.gammas.iter().sum();
                for pos in 0..k {
                    let p = &trace.inputs[pos * d..(pos + 1) * d];
                    let kk = &trace.klein[pos * d..(pos + 1) * d];
                    let gamma = trace.gammas[pos];
                    // d m / d gamma_i = (k_i - m) / total
                    let g_gamma: f64 = kk.iter().zip(m_raw).zip(&g_m).map(|((ki, mi), g)| (ki - mi) * g).sum::<f64>() / total;
                    let pn = geo::sq_norm(p);
                    let g_k: Vec<f64> = g_m.iter().map(|g| gamma / total * g).collect();
                    let pk = geo::dot(p, &g_k);
                    let out = &mut per_position[pos * d..(pos + 1) * d];
                    let dgamma = 4.0 / ((1.0 - pn) * (1.0 - pn));
                    for j in 0..d {
                        out[j] = 2.0 * g_k[j] / (1.0 + pn) - 4.0 * p[j] * pk / ((1.0 + pn) * (1.0 + pn))
                            + g_gamma * dgamma * p[j];
                    }
                }
            }
        }
    }

    // merge duplicate rows
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&i| trace.row_ids[i]);
    let mut row_ids: Vec<u32> = Vec::new();
    let mut row_grads: Vec<f64> = Vec::new();
    for i in order {
        let id = trace.row_ids[i];
        let src = &per_position[i * d..(i + 1) * d];
        if row_ids.last() == Some(&id) {
            let start = row_grads.len() - d;
            row_grads[start..].iter_mut().zip(src).for_each(|(a, b)| *a += b);
        } else {
            row_ids.push(id);
            row_grads.extend_from_slice(src);
        }
    }

    Ok(GradientSet { dim: d, row_ids, row_grads, weights: g_weights, bias: g_bias })
}

/// Gradients of `x (+)_c b` with respect to `x` and `b`.
fn mobius_add_vjp(x: &[f64], b: &[f64], c: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xb = geo::dot(x, b);
    let xx = geo::sq_norm(x);
    let bb = geo::sq_norm(b);
    let a = 1.0 + 2.0 * c * xb + c * bb;
    let bc = 1.0 - c * xx;
    let den = 1.0 + 2.0 * c * xb + c * c * xx * bb;
    let g_num: Vec<f64> = g.iter().map(|v| v / den).collect();
    // numerator / den = output, so d/d den = -<g, out> / den
    let out_dot: f64 = g
        .iter()
        .zip(x.iter().zip(b))
        .map(|(gi, (xi, bi))| gi * (a * xi + bc * bi))
        .sum::<f64>()
        / den;
    let g_den = -out_dot / den;
    let nx = geo::dot(&g_num, x);
    let nb = geo::dot(&g_num, b);
    let g_x = (0..x.len())
        .map(|j| {
            a * g_num[j] + nx * 2.0 * c * b[j] - nb * 2.0 * c * x[j]
                + g_den * (2.0 * c * b[j] + 2.0 * c * c * bb * x[j])
        })
        .collect();
    let g_b = (0..x.len())
        .map(|j| {
            nx * (2.0 * c * x[j] + 2.0 * c * b[j]) + bc * g_num[j]
                + g_den * (2.0 * c * x[j] + 2.0 * c * c * xx * b[j])
        })
        .collect();
    (g_x, g_b)
}

/// Backpropagates through `clamp(exp_0(u))` in place.
fn clamp_vjp_exp(u: &[f64], grad: &mut [f64], c: f64, radius: f64) {
    let (phi, dphi) = geo::tanh_ratio(c * geo::sq_norm(u));
    let e: Vec<f64> = u.iter().map(|v| phi * v).collect();
    clamp_vjp(&e, grad, radius);
    let ug = geo::dot(u, grad);
    grad.iter_mut().zip(u).for_each(|(g, ui)| *g = phi * *g + 2.0 * c * dphi * ug * ui);
}

// ---------------------------------------------------------------------------
// Classifier with vocabulary
// ---------------------------------------------------------------------------

/// A trained model together with the vocabulary and corpus settings needed
/// to turn raw lines into documents.
#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    pub vocab: Vocab,
    pub corpus: CorpusConfig,
    pub model: Model,
}

impl TextClassifier {
    /// Parses a line (labels optional) into a document.
    pub fn document(&self, line: &str) -> Document {
        // parsing without a required label cannot fail
        let parsed = textcorpus::parse_labeled_line(line, &self.corpus, false, 0)
            .expect("label-optional parse is infallible");
        self.vocab.document(&parsed, &self.corpus)
    }

    pub fn probabilities(&self, doc: &Document) -> Result<Vec<f64>> {
        Ok(forward(doc, &self.model, &self.model.arch)?.probs)
    }

    pub fn predict_line(&self, line: &str, k: usize) -> Result<Vec<(u32, f64)>> {
        predict(&self.document(line), &self.model, &self.model.arch, k)
    }
}
