//! Token corpora: on-disk formats, byte-level tokenisation and the synthetic
//! generators used for desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

/// Document separator in the binary format. Never a valid token id.
pub const DOC_SEPARATOR: u16 = 0xFFFF;
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    ByteLevel,
    PreTokenized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub documents: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub provenance: Provenance,
}

impl TokenCorpus {
    pub fn new(documents: Vec<Vec<u32>>, vocab_size: usize, provenance: Provenance) -> Result<Self> {
        let corpus = Self {
            documents,
            vocab_size,
            provenance,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size > DOC_SEPARATOR as usize {
            return Err(Error::Data(format!("vocab size {} out of range", self.vocab_size)));
        }
        for (d, doc) in self.documents.iter().enumerate() {
            if let Some(&t) = doc.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Data(format!(
                    "document {d}: token {t} >= vocab size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn min_doc_len(&self) -> usize {
        self.documents.iter().map(Vec::len).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Little-endian `u16` ids, documents separated by `0xFFFF`.
    BinaryU16 { vocab_size: usize },
    /// UTF-8 text, one token per byte, documents separated by blank lines.
    Utf8Text,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: TokenCorpus,
    /// Documents dropped for being shorter than the requested minimum.
    pub dropped: usize,
}

pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

fn parse_u16_stream(bytes: &[u8], vocab_size: usize) -> Result<Vec<Vec<u32>>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::Parse {
            offset: (bytes.len() - 1) as u64,
            message: "truncated 16-bit token".into(),
        });
    }
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        let id = u16::from_le_bytes([pair[0], pair[1]]);
        if id == DOC_SEPARATOR {
            docs.push(std::mem::take(&mut cur));
            continue;
        }
        if id as usize >= vocab_size {
            return Err(Error::Parse {
                offset: (2 * i) as u64,
                message: format!("token id {id} >= vocab size {vocab_size}"),
            });
        }
        cur.push(u32::from(id));
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

/// Loads a corpus, dropping documents shorter than `min_doc_len` tokens.
pub fn load_token_corpus(path: &Path, format: CorpusFormat, min_doc_len: usize) -> Result<LoadedCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (docs, vocab_size, provenance) = match format {
        CorpusFormat::BinaryU16 { vocab_size } => {
            if vocab_size < 2 || vocab_size > DOC_SEPARATOR as usize {
                return Err(Error::Data(format!("vocab size {vocab_size} out of range")));
            }
            (parse_u16_stream(&bytes, vocab_size)?, vocab_size, Provenance::PreTokenized)
        }
        CorpusFormat::Utf8Text => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                offset: e.valid_up_to() as u64,
                message: "invalid utf-8".into(),
            })?;
            let docs = if text.is_empty() {
                Vec::new()
            } else {
                text.split("\n\n").map(byte_tokenize).collect()
            };
            (docs, BYTE_VOCAB, Provenance::ByteLevel)
        }
    };
    let before = docs.len();
    let documents: Vec<Vec<u32>> = docs.into_iter().filter(|d| d.len() >= min_doc_len).collect();
    let dropped = before - documents.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} documents shorter than {min_doc_len} tokens");
    }
    Ok(LoadedCorpus {
        corpus: TokenCorpus::new(documents, vocab_size, provenance)?,
        dropped,
    })
}

/// Writes a corpus in the binary format, one separator after each document.
pub fn write_token_corpus(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    corpus.validate()?;
    let mut buf = Vec::with_capacity(2 * (corpus.total_tokens() + corpus.len()));
    for doc in &corpus.documents {
        for &t in doc {
            buf.extend_from_slice(&(t as u16).to_le_bytes());
        }
        buf.extend_from_slice(&DOC_SEPARATOR.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Token-id layout of the synthetic vocabulary.
///
/// `[0, 10)` digits, then a query marker, then key markers, then filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticVocab {
    pub vocab_size: usize,
    pub key_count: usize,
}

impl Default for SyntheticVocab {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            key_count: 8,
        }
    }
}

impl SyntheticVocab {
    pub const DIGITS: u32 = 10;

    pub fn validate(&self) -> Result<()> {
        if self.key_count < 1 || self.filler_count() < 3 {
            return Err(Error::config(format!(
                "synthetic vocab {} too small for {} keys",
                self.vocab_size, self.key_count
            )));
        }
        Ok(())
    }

    pub fn digit(&self, d: u32) -> u32 {
        debug_assert!(d < Self::DIGITS);
        d
    }

    pub fn query_marker(&self) -> u32 {
        Self::DIGITS
    }

    pub fn key(&self, i: usize) -> u32 {
        Self::DIGITS + 1 + i as u32
    }

    pub fn is_key(&self, t: u32) -> bool {
        t > Self::DIGITS && ((t - Self::DIGITS - 1) as usize) < self.key_count
    }

    pub fn first_filler(&self) -> u32 {
        Self::DIGITS + 1 + self.key_count as u32
    }

    pub fn filler_count(&self) -> usize {
        self.vocab_size.saturating_sub(Self::DIGITS as usize + 1 + self.key_count)
    }
}

/// Fixed order-2 Markov chain over the filler tokens.
///
/// Each context `(a, b)` has `branching` successors with random weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTable {
    filler: usize,
    first: u32,
    successors: Vec<Vec<(u32, f64)>>,
}

impl MarkovTable {
    pub fn generate(vocab: &SyntheticVocab, branching: usize, seed: u64) -> Result<Self> {
        vocab.validate()?;
        let filler = vocab.filler_count();
        if branching < 1 || branching > filler {
            return Err(Error::config(format!("branching {branching} outside 1..={filler}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = vocab.first_filler();
        let successors = (0..filler * filler)
            .map(|_| {
                let picks = index::sample(&mut rng, filler, branching).into_vec();
                let w: Vec<f64> = (0..branching).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = w.iter().sum();
                picks
                    .into_iter()
                    .zip(w)
                    .map(|(p, w)| (first + p as u32, w / total))
                    .collect()
            })
            .collect();
        Ok(Self {
            filler,
            first,
            successors,
        })
    }

    fn context(&self, a: u32, b: u32) -> usize {
        (a - self.first) as usize * self.filler + (b - self.first) as usize
    }

    /// Successor distribution of context `(a, b)`.
    pub fn successors(&self, a: u32, b: u32) -> &[(u32, f64)] {
        &self.successors[self.context(a, b)]
    }

    pub fn filler_tokens(&self) -> std::ops::Range<u32> {
        self.first..self.first + self.filler as u32
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, a: u32, b: u32, rng: &mut R) -> u32 {
        let succ = self.successors(a, b);
        let mut x: f64 = rng.random();
        for &(t, p) in succ {
            if x < p {
                return t;
            }
            x -= p;
        }
        succ[succ.len() - 1].0
    }

    /// Stateful filler stream; the chain context is carried across calls.
    pub fn stream<R: Rng + ?Sized>(&self, rng: &mut R) -> MarkovStream {
        let a = self.first + rng.random_range(0..self.filler as u32);
        let b = self.first + rng.random_range(0..self.filler as u32);
        MarkovStream { a, b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MarkovStream {
    a: u32,
    b: u32,
}

impl MarkovStream {
    pub fn next<R: Rng + ?Sized>(&mut self, table: &MarkovTable, rng: &mut R) -> u32 {
        let t = table.sample_next(self.a, self.b, rng);
        self.a = self.b;
        self.b = t;
        t
    }

    pub fn fill<R: Rng + ?Sized>(&mut self, table: &MarkovTable, n: usize, out: &mut Vec<u32>, rng: &mut R) {
        out.extend((0..n).map(|_| self.next(table, rng)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    RecallTask,
    MarkovText,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall-task" => Ok(Self::RecallTask),
            "markov-text" => Ok(Self::MarkovText),
            other => Err(Error::config(format!("unknown corpus kind `{other}`"))),
        }
    }
}

fn default_branching() -> usize {
    3
}

fn default_table_seed() -> u64 {
    0x9E37_79B9
}

fn default_passkey_digits() -> usize {
    5
}

/// Parameters of the synthetic language: vocabulary, Markov filler and the
/// shape of key/value recall episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub vocab: SyntheticVocab,
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Seed of the transition table; shared by training and held-out text.
    #[serde(default = "default_table_seed")]
    pub table_seed: u64,
    #[serde(default = "default_passkey_digits")]
    pub value_digits: usize,
    /// Filler tokens between a statement and its recall, drawn from `min_gap..=max_gap`.
    pub min_gap: usize,
    pub max_gap: usize,
    /// Filler tokens before each episode, drawn from `0..=max_lead`.
    pub max_lead: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab: SyntheticVocab::default(),
            branching: default_branching(),
            table_seed: default_table_seed(),
            value_digits: default_passkey_digits(),
            min_gap: 0,
            max_gap: 40,
            max_lead: 16,
        }
    }
}

/// The synthetic language: vocabulary plus its Markov filler chain.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub spec: SyntheticSpec,
    pub table: MarkovTable,
}

impl SyntheticLanguage {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.min_gap > spec.max_gap {
            return Err(Error::config("min_gap must not exceed max_gap"));
        }
        if spec.value_digits < 1 {
            return Err(Error::config("value_digits must be at least 1"));
        }
        let table = MarkovTable::generate(&spec.vocab, spec.branching, spec.table_seed)?;
        Ok(Self { spec, table })
    }

    pub fn vocab(&self) -> &SyntheticVocab {
        &self.spec.vocab
    }

    fn random_value<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        (0..self.spec.value_digits)
            .map(|_| self.spec.vocab.digit(rng.random_range(0..SyntheticVocab::DIGITS)))
            .collect()
    }

    /// A document of Markov filler with no recall episodes.
    pub fn markov_document<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        self.table.stream(rng).fill(&self.table, len, &mut out, rng);
        out
    }

    /// A document of Markov filler interleaved with recall episodes:
    /// `K v..` then, after a filler gap, `Q K v..` with the same value.
    ///
    /// The key of each episode is the one least recently used, so a key never
    /// repeats while an earlier statement with a different value is nearer.
    pub fn recall_document<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let vocab = &self.spec.vocab;
        let mut out = Vec::with_capacity(len + 64);
        let mut stream = self.table.stream(rng);
        let mut keys: Vec<usize> = index::sample(rng, vocab.key_count, vocab.key_count).into_vec();
        let mut next_key = 0;
        while out.len() < len {
            let lead = rng.random_range(0..=self.spec.max_lead);
            stream.fill(&self.table, lead, &mut out, rng);
            let key = vocab.key(keys[next_key]);
            next_key += 1;
            if next_key == keys.len() {
                next_key = 0;
                let last = keys[keys.len() - 1];
                keys = index::sample(rng, vocab.key_count, vocab.key_count).into_vec();
                if keys.len() > 1 && keys[0] == last {
                    keys.swap(0, 1);
                }
            }
            let value = self.random_value(rng);
            out.push(key);
            out.extend_from_slice(&value);
            let gap = rng.random_range(self.spec.min_gap..=self.spec.max_gap);
            stream.fill(&self.table, gap, &mut out, rng);
            out.push(vocab.query_marker());
            out.push(key);
            out.extend_from_slice(&value);
        }
        out.truncate(len);
        out
    }
}

/// Generates `num_docs` documents of `doc_len` tokens each.
pub fn generate_synthetic_corpus(
    kind: SyntheticKind,
    spec: &SyntheticSpec,
    num_docs: usize,
    doc_len: usize,
    seed: u64,
) -> Result<TokenCorpus> {
    if num_docs < 1 || doc_len < 1 {
        return Err(Error::config("corpus size must be at least one document of one token"));
    }
    let lang = SyntheticLanguage::new(*spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..num_docs)
        .map(|_| match kind {
            SyntheticKind::RecallTask => lang.recall_document(doc_len, &mut rng),
            SyntheticKind::MarkovText => lang.markov_document(doc_len, &mut rng),
        })
        .collect();
    TokenCorpus::new(documents, spec.vocab.vocab_size, Provenance::Synthetic)
}
