//! Command-line surface and the binary model format.
//!
//! ```text
//! hypertext train   -input <file> -output <model> [options]
//! hypertext test    <model> <test-file>
//! hypertext predict <model> <file|-> [k] [-k <k>]
//! hypertext sweep   -input <train> -test <test> -output <report.jsonl> [-dims 5,10] [options]
//! hypertext ablation -input <train> -test <test> -output <report.jsonl> [options]
//! hypertext flops   [-dims 10,50,100] [-labels 4] [-tokens 50] [-transcendental 10]
//! ```
//!
//! # Model file
//!
//! All integers little-endian, fixed width:
//!
//! ```text
//! magic "HTXT" | version u32 | geometry u8 | pooling u8 | classifier u8
//! dim u32 | curvature f64 | n_words u32 | bucket u32 | n_labels u32
//! word_ngrams u32 | min_count u32 | label_prefix str
//! n_words x (word str, count u64) | n_labels x label str
//! embedding f32[(n_words + bucket) * dim] | M f32[n_labels * dim] | b f32[n_labels]
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{self, Dataset, FlopsConvention, SweepOptions};
use crate::hypergeo::Curvature;
use crate::model::{Architecture, ClassifierKind, EmbeddingTable, Geometry, Model, OutputLayer, Pooling, TextClassifier};
use crate::optim::{self, TrainConfig};
use crate::textcorpus::{CorpusConfig, Vocab};

pub const MAGIC: [u8; 4] = *b"HTXT";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f32>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save<W: Write>(classifier: &TextClassifier, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let m = &classifier.model;
    let v = &classifier.vocab;
    let cfg = &classifier.corpus;
    w.write_all(&MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&[m.arch.geometry.code(), m.arch.pooling.code(), m.arch.classifier.code()])?;
    put_u32(&mut w, m.emb.dim() as u32)?;
    w.write_all(&m.arch.curvature.value().to_le_bytes())?;
    put_u32(&mut w, v.n_words() as u32)?;
    put_u32(&mut w, cfg.bucket)?;
    put_u32(&mut w, v.n_labels() as u32)?;
    put_u32(&mut w, cfg.word_ngrams)?;
    put_u32(&mut w, cfg.min_count)?;
    put_str(&mut w, &cfg.label_prefix)?;
    for (word, count) in v.words() {
        put_str(&mut w, word)?;
        w.write_all(&count.to_le_bytes())?;
    }
    for label in v.labels() {
        put_str(&mut w, label)?;
    }
    let emb = m.emb.data();
    put_f32s(&mut w, (0..emb.len()).map(|i| emb.get(i)))?;
    let weights = m.out.weights();
    put_f32s(&mut w, (0..weights.len()).map(|i| weights.get(i)))?;
    let bias = m.out.bias();
    put_f32s(&mut w, (0..bias.len()).map(|i| bias.get(i)))?;
    w.flush()?;
    Ok(())
}

pub fn save_path(classifier: &TextClassifier, path: &Path) -> Result<()> {
    save(classifier, File::create(path)?)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = Vec::new();
        (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(Error::Format("truncated string".into()));
        }
        String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            self.inner.read_exact(&mut buf).map_err(truncated)?;
            out.push(f32::from_le_bytes(buf));
        }
        Ok(out)
    }
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

fn tag<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Format(format!("unknown {what} tag")))
}

pub fn load<R: Read>(r: R) -> Result<TextClassifier> {
    let mut r = Reader { inner: BufReader::new(r) };
    let mut magic = [0u8; 4];
    match r.inner.read_exact(&mut magic) {
        Ok(()) if magic == MAGIC => {}
        Ok(()) => return Err(Error::BadMagic),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(Error::BadMagic),
        Err(e) => return Err(e.into()),
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let geometry = tag(Geometry::from_code(r.u8()?), "geometry")?;
    let pooling = tag(Pooling::from_code(r.u8()?), "pooling")?;
    let classifier = tag(ClassifierKind::from_code(r.u8()?), "classifier")?;
    let dim = r.u32()? as usize;
    let curvature = Curvature::new(r.f64()?).map_err(|e| Error::Format(e.to_string()))?;
    let n_words = r.u32()? as usize;
    let bucket = r.u32()?;
    let n_labels = r.u32()? as usize;
    let word_ngrams = r.u32()?;
    let min_count = r.u32()?;
    let label_prefix = r.string()?;
    if dim == 0 {
        return Err(Error::Format("zero dimension".into()));
    }
    let mut words = Vec::with_capacity(n_words.min(1 << 20));
    for _ in 0..n_words {
        let w = r.string()?;
        words.push((w, r.u64()?));
    }
    let labels = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_parts(words, labels)?;
    let rows = n_words + bucket as usize;
    let emb = EmbeddingTable::from_f32(rows, dim, &r.f32s(rows * dim)?)?;
    let weights = r.f32s(n_labels * dim)?;
    let bias = r.f32s(n_labels)?;
    let out = OutputLayer::from_f32(n_labels, dim, &weights, &bias)?;
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    let arch = Architecture { geometry, pooling, classifier, curvature };
    let corpus = CorpusConfig { min_count, word_ngrams, bucket, label_prefix };
    let model = Model::new(arch, emb, out).map_err(|e| Error::Format(e.to_string()))?;
    Ok(TextClassifier { vocab, corpus, model })
}

pub fn load_path(path: &Path) -> Result<TextClassifier> {
    load(File::open(path)?)
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

const USAGE: &str = "usage: hypertext <command> <args>

commands:
  train     train a classifier
  test      evaluate a classifier on a labeled file
  predict   print the most likely labels for each line
  sweep     accuracy vs embedding dimension report (JSON lines)
  ablation  layer ablation report (JSON lines)
  flops     analytic FLOPs per inference";

const TRAIN_USAGE: &str = "usage: hypertext train -input <file> -output <model> [options]

  -dim <int>          embedding dimension [10]
  -lr <float>         initial learning rate [0.05]
  -epoch <int>        number of epochs [5]
  -wordNgrams <int>   max word n-gram order [2]
  -bucket <int>       number of n-gram buckets [2000000]
  -minCount <int>     minimal word count [1]
  -label <str>        label prefix [__label__]
  -geometry <str>     hyperbolic | euclidean [hyperbolic]
  -curvature <float>  curvature of the Möbius layer [1.0]
  -pooling <str>      einstein | mean [einstein for hyperbolic, else mean]
  -classifier <str>   mobius | linear [mobius for hyperbolic, else linear]
  -thread <int>       number of threads [1]
  -seed <int>         random seed [42]
  -initRange <float>  rows start uniform in [-r, r]^dim [0.001]
  -optimizer <str>    rsgd | radam (Riemannian Adam) [rsgd]
  -verbose <int>      0 silences progress output [1]";

/// Usage errors carry the message shown before exiting with status 1.
#[derive(Debug)]
struct UsageError(String);

struct Args {
    flags: HashMap<String, String>,
    positional: Vec<String>,
}

impl Args {
    fn parse(args: &[String], allowed: &[&str]) -> std::result::Result<Self, UsageError> {
        let mut flags = HashMap::new();
        let mut positional = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            if a.len() > 1 && a.starts_with('-') && a.parse::<f64>().is_err() {
                let name = a.trim_start_matches('-');
                if !allowed.contains(&name) {
                    return Err(UsageError(format!("unknown argument: {a}")));
                }
                let value = it.next().ok_or_else(|| UsageError(format!("missing value for {a}")))?;
                flags.insert(name.to_string(), value.clone());
            } else {
                positional.push(a.clone());
            }
        }
        Ok(Args { flags, positional })
    }

    fn get<T: std::str::FromStr>(&self, name: &str, default: T) -> std::result::Result<T, UsageError> {
        match self.flags.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| UsageError(format!("invalid value for -{name}: {v}"))),
        }
    }

    fn required(&self, name: &str) -> std::result::Result<&str, UsageError> {
        self.flags
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| UsageError(format!("missing required argument -{name}")))
    }
}

const TRAIN_FLAGS: &[&str] = &[
    "input", "output", "dim", "lr", "epoch", "wordNgrams", "bucket", "minCount", "label", "geometry",
    "curvature", "pooling", "classifier", "thread", "seed", "verbose", "initRange",
    "optimizer",
];

fn train_config(args: &Args) -> std::result::Result<TrainConfig, UsageError> {
    let geometry: Geometry = parse_tag(args, "geometry", Geometry::Hyperbolic)?;
    let curvature = Curvature::new(args.get("curvature", 1.0)?).map_err(|e| UsageError(e.to_string()))?;
    let defaults = Architecture::for_geometry(geometry, curvature);
    let arch = Architecture {
        pooling: parse_tag(args, "pooling", defaults.pooling)?,
        classifier: parse_tag(args, "classifier", defaults.classifier)?,
        ..defaults
    };
    let cfg = TrainConfig {
        lr0: args.get("lr", 0.05)?,
        epochs: args.get("epoch", 5)?,
        threads: args.get("thread", 1)?,
        seed: args.get("seed", 42)?,
        dim: args.get("dim", 10)?,
        init_range: args.get("initRange", crate::model::INIT_RANGE)?,
        optimizer: parse_tag(args, "optimizer", optim::Optimizer::Rsgd)?,
        arch,
        corpus: CorpusConfig {
            min_count: args.get("minCount", 1)?,
            word_ngrams: args.get("wordNgrams", 2)?,
            bucket: args.get("bucket", 2_000_000)?,
            label_prefix: args.get("label", crate::textcorpus::DEFAULT_LABEL_PREFIX.to_string())?,
        },
        progress: args.get::<u32>("verbose", 1)? > 0,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn parse_tag<T: std::str::FromStr<Err = Error>>(args: &Args, name: &str, default: T) -> std::result::Result<T, UsageError> {
    match args.flags.get(name) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e: Error| UsageError(e.to_string())),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<Vec<T>, UsageError> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| UsageError(format!("invalid {what}: {p}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

enum Failure {
    Usage(UsageError),
    Run(Error),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the command line `args` (without the program name). Returns the
/// process exit code.
pub fn run(args: &[String], stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some((cmd, rest)) = args.split_first() else {
        let _ = writeln!(err, "{USAGE}");
        return 1;
    };
    let result = match cmd.as_str() {
        "train" => cmd_train(rest, out, err),
        "test" => cmd_test(rest, out, err),
        "predict" => cmd_predict(rest, stdin, out),
        "sweep" => cmd_sweep(rest, out, err),
        "ablation" => cmd_ablation(rest, out, err),
        "flops" => cmd_flops(rest, out),
        "help" | "-h" | "--help" => {
            let _ = writeln!(out, "{USAGE}");
            return 0;
        }
        other => Err(Failure::Usage(UsageError(format!("unknown command: {other}")))),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(UsageError(msg))) => {
            let _ = writeln!(err, "{msg}");
            if cmd == "train" {
                let _ = writeln!(err, "{TRAIN_USAGE}");
            } else {
                let _ = writeln!(err, "{USAGE}");
            }
            1
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn cmd_train(args: &[String], out: &mut dyn Write, _err: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, TRAIN_FLAGS)?;
    let input = PathBuf::from(args.required("input")?);
    let output = PathBuf::from(args.required("output")?);
    let cfg = train_config(&args)?;
    let trained = optim::train(&input, &cfg)?;
    save_path(&trained.classifier, &output)?;
    writeln!(out, "final loss: {:.6}", trained.final_loss)?;
    Ok(())
}

fn cmd_test(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, &[])?;
    let [model_path, test_path] = args.positional.as_slice() else {
        return Err(UsageError("usage: hypertext test <model> <test-file>".into()).into());
    };
    let classifier = load_path(Path::new(model_path))?;
    let lines = optim::read_lines(Path::new(test_path))?;
    let docs = optim::documents(&lines, &classifier.vocab, &classifier.corpus, false)?;
    let unlabeled = docs.iter().filter(|d| d.gold == crate::textcorpus::Gold::Missing).count();
    if unlabeled > 0 {
        writeln!(err, "warning: skipped {unlabeled} line(s) without a label")?;
    }
    let acc = eval::accuracy(&classifier, &docs)?;
    if acc.total == 0 {
        return Err(Error::EmptyInput("test file has no labeled examples").into());
    }
    if acc.unseen > 0 {
        writeln!(err, "warning: {} example(s) carry labels unseen in training; counted as wrong", acc.unseen)?;
    }
    writeln!(out, "N\t{}", acc.total)?;
    writeln!(out, "Accuracy\t{:.4}", acc.value())?;
    Ok(())
}

fn cmd_predict(args: &[String], stdin: &mut dyn BufRead, out: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, &["k"])?;
    let (model_path, input, k) = match args.positional.as_slice() {
        [m, i] => (m, i, args.get("k", 1usize)?),
        [m, i, k] => (m, i, k.parse().map_err(|_| UsageError(format!("invalid k: {k}")))?),
        _ => return Err(UsageError("usage: hypertext predict <model> <file|-> [k]".into()).into()),
    };
    if k == 0 {
        return Err(UsageError("k must be >= 1".into()).into());
    }
    let classifier = load_path(Path::new(model_path))?;
    let mut file_reader;
    let reader: &mut dyn BufRead = if input == "-" {
        stdin
    } else {
        file_reader = BufReader::new(File::open(input)?);
        &mut file_reader
    };
    let prefix = &classifier.corpus.label_prefix;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let top = classifier.predict_line(&line, k)?;
        let fields: Vec<String> = top
            .iter()
            .map(|(id, p)| format!("{prefix}{} {p:.6}", classifier.vocab.label(*id)))
            .collect();
        writeln!(out, "{}", fields.join(" "))?;
    }
    Ok(())
}

const EVAL_FLAGS: &[&str] = &[
    "input", "test", "output", "dims", "geometries", "name", "dim", "lr", "epoch", "wordNgrams", "bucket",
    "minCount", "label", "geometry", "curvature", "pooling", "classifier", "thread", "seed", "verbose",
    "initRange", "optimizer", "timing",
];

fn load_dataset(args: &Args, cfg: &TrainConfig) -> std::result::Result<Dataset, Failure> {
    let train = PathBuf::from(args.required("input")?);
    let test = PathBuf::from(args.required("test")?);
    let default_name = train.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = args.get("name", default_name)?;
    Ok(Dataset::load(&name, &train, &test, &cfg.corpus)?)
}

fn sweep_options(args: &Args) -> std::result::Result<SweepOptions, UsageError> {
    Ok(SweepOptions { conv: FlopsConvention::default(), record_timing: args.get::<u32>("timing", 1)? > 0 })
}

fn cmd_sweep(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, EVAL_FLAGS)?;
    let cfg = train_config(&args)?;
    let dims: Vec<usize> = parse_list(&args.get("dims", "5,10".to_string())?, "dim")?;
    let geometries: Vec<Geometry> = args
        .get("geometries", "hyperbolic,euclidean".to_string())?
        .split(',')
        .map(|g| g.trim().parse().map_err(|e: Error| UsageError(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;
    let output = PathBuf::from(args.required("output")?);
    let data = load_dataset(&args, &cfg)?;
    let report = eval::run_dimension_sweep(&data, &dims, &geometries, &cfg, &sweep_options(&args)?)?;
    report.write_jsonl(File::create(&output)?)?;
    for row in &report.rows {
        match &row.error {
            None => writeln!(out, "{}\tdim {}\taccuracy {:.4}", row.geometry, row.dim, row.accuracy)?,
            Some(e) => writeln!(err, "{}\tdim {}\tfailed: {e}", row.geometry, row.dim)?,
        }
    }
    Ok(())
}

fn cmd_ablation(args: &[String], out: &mut dyn Write, _err: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, EVAL_FLAGS)?;
    let cfg = train_config(&args)?;
    let output = PathBuf::from(args.required("output")?);
    let data = load_dataset(&args, &cfg)?;
    let report = eval::run_ablations(&data, &cfg, &sweep_options(&args)?)?;
    report.write_jsonl(File::create(&output)?)?;
    for row in &report.rows {
        writeln!(out, "{}\taccuracy {:.4}", row.variant, row.row.accuracy)?;
    }
    Ok(())
}

/// Reported for comparison only; the estimator's counting convention is our own.
pub const PUBLISHED_FLOPS_RATIO_BAND: (f64, f64) = (4.5, 6.7);

fn cmd_flops(args: &[String], out: &mut dyn Write) -> CmdResult {
    let args = Args::parse(args, &["dims", "labels", "tokens", "transcendental"])?;
    let dims: Vec<usize> = parse_list(&args.get("dims", "10,50,100".to_string())?, "dim")?;
    let labels: usize = args.get("labels", 4)?;
    let tokens: f64 = args.get("tokens", 50.0)?;
    let conv = FlopsConvention { transcendental: args.get("transcendental", 10.0)?, ..Default::default() };
    let (lo, hi) = PUBLISHED_FLOPS_RATIO_BAND;
    writeln!(out, "# multiply-add = {}, transcendental = {}; published band {lo}-{hi}x", conv.multiply_add, conv.transcendental)?;
    writeln!(out, "dim\thyperbolic\teuclidean\tratio")?;
    for d in dims {
        let e = eval::estimate_flops(d, labels, tokens, &conv)?;
        writeln!(out, "{d}\t{:.0}\t{:.0}\t{:.2}", e.hyper_flops, e.euclid_flops, e.ratio)?;
    }
    Ok(())
}
