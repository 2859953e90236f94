//! fastText-format corpus ingestion.
//!
//! One example per line; whitespace-separated tokens; tokens starting with the
//! label prefix (default `__label__`) are labels. Word n-grams (`n >= 2`) are
//! hashed into a fixed number of buckets placed after the word rows of the
//! embedding table.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{Error, Result};

pub const DEFAULT_LABEL_PREFIX: &str = "__label__";

/// Byte placed between tokens when hashing an n-gram.
pub const NGRAM_SEPARATOR: u8 = 0x1F;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub min_count: u32,
    /// Largest n-gram order; 1 disables n-grams.
    pub word_ngrams: u32,
    pub bucket: u32,
    pub label_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            min_count: 1,
            word_ngrams: 2,
            bucket: 2_000_000,
            label_prefix: DEFAULT_LABEL_PREFIX.to_string(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count < 1 {
            return Err(Error::InvalidConfig("minCount must be >= 1".into()));
        }
        if self.word_ngrams < 1 {
            return Err(Error::InvalidConfig("wordNgrams must be >= 1".into()));
        }
        if self.label_prefix.is_empty() {
            return Err(Error::InvalidConfig("label prefix must not be empty".into()));
        }
        Ok(())
    }
}

/// Labels and tokens of one input line, borrowed from the line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedLine<'a> {
    pub labels: Vec<&'a str>,
    pub tokens: Vec<&'a str>,
}

/// Splits a line on Unicode whitespace into labels (prefix stripped) and
/// tokens. With `require_label`, a non-blank line without labels is an error.
pub fn parse_labeled_line<'a>(
    line: &'a str,
    cfg: &CorpusConfig,
    require_label: bool,
    line_no: usize,
) -> Result<ParsedLine<'a>> {
    let mut labels = Vec::new();
    let mut tokens = Vec::new();
    for tok in line.split_whitespace() {
        match tok.strip_prefix(cfg.label_prefix.as_str()) {
            Some(label) => labels.push(label),
            None => tokens.push(tok),
        }
    }
    if require_label && labels.is_empty() {
        return Err(Error::NoLabel { line: line_no });
    }
    Ok(ParsedLine { labels, tokens })
}

/// Word and label dictionaries. Ids are dense and assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<(String, u64)>,
    word_index: HashMap<String, u32>,
    labels: Vec<String>,
    label_index: HashMap<String, u32>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its serialized parts.
    pub fn from_parts(words: Vec<(String, u64)>, labels: Vec<String>) -> Result<Self> {
        let word_index = index_of(words.iter().map(|(w, _)| w.as_str()))?;
        let label_index = index_of(labels.iter().map(String::as_str))?;
        Ok(Vocab { words, word_index, labels, label_index })
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.word_index.get(word).copied()
    }

    pub fn label_id(&self, label: &str) -> Option<u32> {
        self.label_index.get(label).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize].0
    }

    pub fn word_count(&self, id: u32) -> u64 {
        self.words[id as usize].1
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    pub fn words(&self) -> &[(String, u64)] {
        &self.words
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Converts a parsed line to embedding-row ids.
    pub fn document(&self, parsed: &ParsedLine<'_>, cfg: &CorpusConfig) -> Document {
        let gold = match parsed.labels.first() {
            None => Gold::Missing,
            Some(l) => self.label_id(l).map_or(Gold::Unseen, Gold::Known),
        };
        let label_ids = parsed.labels.iter().filter_map(|l| self.label_id(l)).collect();
        let token_ids = parsed.tokens.iter().filter_map(|t| self.word_id(t)).collect();
        let ngram_ids = extract_ngrams(&parsed.tokens, self.n_words() as u32, cfg);
        Document { gold, label_ids, token_ids, ngram_ids }
    }
}

fn index_of<'a>(names: impl Iterator<Item = &'a str>) -> Result<HashMap<String, u32>> {
    let mut index = HashMap::new();
    for (i, name) in names.enumerate() {
        if index.insert(name.to_string(), i as u32).is_some() {
            return Err(Error::Format(format!("duplicate vocabulary entry {name:?}")));
        }
    }
    Ok(index)
}

/// Builds the vocabulary from a stream of lines. Blank lines are skipped.
pub fn build_vocab<I, S>(lines: I, cfg: &CorpusConfig) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    cfg.validate()?;
    let mut counts: Vec<(String, u64)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut label_index = HashMap::new();
    let mut labeled_lines = 0usize;

    for (no, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_labeled_line(line, cfg, true, no + 1)?;
        labeled_lines += 1;
        for label in parsed.labels {
            if !label_index.contains_key(label) {
                label_index.insert(label.to_string(), labels.len() as u32);
                labels.push(label.to_string());
            }
        }
        for tok in parsed.tokens {
            match seen.get(tok) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    seen.insert(tok.to_string(), counts.len());
                    counts.push((tok.to_string(), 1));
                }
            }
        }
    }
    if labeled_lines == 0 {
        return Err(Error::EmptyCorpus);
    }

    let words: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= u64::from(cfg.min_count))
        .collect();
    let word_index = words.iter().enumerate().map(|(i, (w, _))| (w.clone(), i as u32)).collect();
    Ok(Vocab { words, word_index, labels, label_index })
}

/// Reads every line of `reader` through [`build_vocab`].
pub fn build_vocab_from_reader<R: BufRead>(reader: R, cfg: &CorpusConfig) -> Result<Vocab> {
    let lines = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
    build_vocab(lines, cfg)
}

/// The gold label of a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gold {
    /// The line carried no label.
    Missing,
    Known(u32),
    /// The first label on the line is not in the vocabulary.
    Unseen,
}

/// Embedding-row ids for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub gold: Gold,
    pub label_ids: Vec<u32>,
    /// In-vocabulary word ids, in order.
    pub token_ids: Vec<u32>,
    /// Hashed n-gram ids, already offset by `n_words`.
    pub ngram_ids: Vec<u32>,
}

impl Document {
    /// All embedding rows pooled by the forward pass.
    pub fn rows(&self) -> impl Iterator<Item = u32> + '_ {
        self.token_ids.iter().chain(&self.ngram_ids).copied()
    }

    pub fn n_rows(&self) -> usize {
        self.token_ids.len() + self.ngram_ids.len()
    }

    /// Label id used for loss and accuracy: the first label on the line.
    pub fn label(&self) -> Option<u32> {
        match self.gold {
            Gold::Known(id) => Some(id),
            _ => None,
        }
    }
}

/// FNV-1a (64-bit) over raw bytes.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hash of the n-gram `tokens[0] 0x1F tokens[1] ... tokens[n-1]`.
pub fn ngram_hash(tokens: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            h = (h ^ u64::from(NGRAM_SEPARATOR)).wrapping_mul(FNV_PRIME);
        }
        for b in tok.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Hashed ids of every contiguous n-gram of order `2..=word_ngrams` over the
/// raw token sequence (out-of-vocabulary words included). Ids fall in
/// `[n_words, n_words + bucket)`.
pub fn extract_ngrams(tokens: &[&str], n_words: u32, cfg: &CorpusConfig) -> Vec<u32> {
    if cfg.word_ngrams < 2 || cfg.bucket == 0 {
        return Vec::new();
    }
    let bucket = u64::from(cfg.bucket);
    let mut out = Vec::new();
    for n in 2..=cfg.word_ngrams as usize {
        for window in tokens.windows(n) {
            out.push(n_words + (ngram_hash(window) % bucket) as u32);
        }
    }
    out
}
