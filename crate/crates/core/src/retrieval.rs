//! Chunk-level quantization search.
//!
//! The context is cut into equal-length chunks; each chunk and the query are
//! embedded, scored by cosine similarity, and every chunk is assigned a
//! precision tier from two thresholds placed inside the observed score range:
//!
//! ```text
//! t_low  = s_min + (s_max - s_min) * alpha
//! t_high = s_max - (s_max - s_min) * beta
//! tier   = INT2 if s < t_low, FP16 if s > t_high, INT4 otherwise
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a context chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "INT2")]
    Int2,
    #[serde(rename = "INT4")]
    Int4,
    #[serde(rename = "FP16")]
    Fp16,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Int2, Tier::Int4, Tier::Fp16];

    /// Nominal bits per stored element.
    pub fn bits(self) -> u32 {
        match self {
            Tier::Int2 => 2,
            Tier::Int4 => 4,
            Tier::Fp16 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Int2 => "INT2",
            Tier::Int4 => "INT4",
            Tier::Fp16 => "FP16",
        }
    }

    /// One step up in precision, saturating at FP16.
    pub fn promoted(self) -> Tier {
        match self {
            Tier::Int2 => Tier::Int4,
            _ => Tier::Fp16,
        }
    }
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

/// Equal-length chunk spans over a token sequence plus the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub chunk_size: usize,
    pub num_chunks: usize,
    pub context_len: usize,
}

impl ChunkSet {
    pub fn chunk(&self, i: usize) -> Range<usize> {
        assert!(i < self.num_chunks, "chunk {i} out of {}", self.num_chunks);
        i * self.chunk_size..(i + 1) * self.chunk_size
    }

    pub fn chunks(&self) -> impl ExactSizeIterator<Item = Range<usize>> + '_ {
        (0..self.num_chunks).map(|i| self.chunk(i))
    }

    /// Trailing span shorter than one chunk; always kept at full precision.
    pub fn tail(&self) -> Range<usize> {
        self.num_chunks * self.chunk_size..self.context_len
    }

    pub fn tail_len(&self) -> usize {
        self.context_len - self.num_chunks * self.chunk_size
    }
}

pub fn segment_context<T>(tokens: &[T], chunk_size: usize) -> Result<ChunkSet> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument(
            "chunk_size must be at least 1".into(),
        ));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("context is empty".into()));
    }
    Ok(ChunkSet {
        chunk_size,
        num_chunks: tokens.len() / chunk_size,
        context_len: tokens.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f32>,
    norm: f32,
}

impl Embedding {
    pub fn new(vector: Vec<f32>) -> Self {
        let norm = crate::tensor::dot(&vector, &vector).sqrt() as f32;
        Self { vector, norm }
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Empty or fully out-of-vocabulary input.
    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }
}

/// What an encoder sees: a stable id (used by file-backed encoders) and the tokens.
#[derive(Debug, Clone, Copy)]
pub struct Span<'a> {
    pub id: &'a str,
    pub tokens: &'a [String],
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, span: Span<'_>) -> Result<Embedding>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed bag-of-words, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBowEncoder {
    dim: usize,
    seed: u64,
}

impl HashedBowEncoder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be at least 1".into(),
            ));
        }
        Ok(Self { dim, seed })
    }
}

impl Default for HashedBowEncoder {
    fn default() -> Self {
        Self {
            dim: Self::DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl Encoder for HashedBowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, span: Span<'_>) -> Result<Embedding> {
        let mut v = vec![0.0f32; self.dim];
        for tok in span.tokens {
            v[(fnv1a(self.seed, tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Ok(l2_normalized(v))
    }
}

/// TF-IDF over a vocabulary fitted on one run's documents (chunks and query).
///
/// Smoothed idf: `ln((1 + n) / (1 + df)) + 1`. Raw term counts, L2-normalized.
#[derive(Debug, Clone)]
pub struct TfIdfEncoder {
    vocab: BTreeMap<String, usize>,
    idf: Vec<f32>,
}

impl TfIdfEncoder {
    pub fn fit<D: AsRef<[String]>>(documents: &[D]) -> Self {
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in documents {
            let mut seen: Vec<&str> = doc.as_ref().iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for term in seen {
                *df.entry(term).or_default() += 1;
            }
        }
        let n = documents.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, count)) in df.into_iter().enumerate() {
            vocab.insert(term.to_owned(), i);
            idf.push((((1.0 + n) / (1.0 + count as f64)).ln() + 1.0) as f32);
        }
        Self { vocab, idf }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }
}

impl Encoder for TfIdfEncoder {
    fn dim(&self) -> usize {
        self.idf.len()
    }

    fn encode(&self, span: Span<'_>) -> Result<Embedding> {
        let mut v = vec![0.0f32; self.idf.len()];
        for tok in span.tokens {
            if let Some(&i) = self.vocab.get(tok.as_str()) {
                v[i] += 1.0;
            }
        }
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        Ok(l2_normalized(v))
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f32>,
}

/// Looks embeddings up by span id from a JSON-lines file of `{"id", "vector"}`
/// records. Vectors are returned verbatim.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl PrecomputedEncoder {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = Self::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line)?;
            if out.vectors.is_empty() {
                out.dim = rec.vector.len();
            } else if rec.vector.len() != out.dim {
                return Err(Error::shape(format!(
                    "embedding on line {} has dimension {}, expected {}",
                    lineno + 1,
                    rec.vector.len(),
                    out.dim
                )));
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "embedding `{}` has non-finite entries",
                    rec.id
                )));
            }
            out.vectors.insert(rec.id, rec.vector);
        }
        Ok(out)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if !self.vectors.is_empty() && vector.len() != self.dim {
            return Err(Error::shape(format!(
                "embedding has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        self.dim = vector.len();
        self.vectors.insert(id.into(), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Encoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, span: Span<'_>) -> Result<Embedding> {
        self.vectors
            .get(span.id)
            .map(|v| Embedding::new(v.clone()))
            .ok_or_else(|| Error::MissingEmbedding(span.id.to_owned()))
    }
}

fn l2_normalized(mut v: Vec<f32>) -> Embedding {
    let norm = crate::tensor::dot(&v, &v).sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
    }
    Embedding::new(v)
}

/// `q·c / (‖q‖ ‖c‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(q: &Embedding, c: &Embedding) -> Result<f64> {
    if q.dim() != c.dim() {
        return Err(Error::shape(format!(
            "embedding dimensions differ: {} vs {}",
            q.dim(),
            c.dim()
        )));
    }
    if q.is_zero() || c.is_zero() {
        return Err(Error::ZeroNorm);
    }
    let qn = crate::tensor::dot(&q.vector, &q.vector).sqrt();
    let cn = crate::tensor::dot(&c.vector, &c.vector).sqrt();
    Ok((crate::tensor::dot(&q.vector, &c.vector) / (qn * cn)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_low: f64,
    pub t_high: f64,
}

pub fn compute_thresholds(scores: &[f64], alpha: f64, beta: f64) -> Result<Thresholds> {
    validate_alpha_beta(alpha, beta)?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to threshold".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let (s_min, s_max) = min_max(scores);
    let range = s_max - s_min;
    if range > 0.0 && alpha + beta > 1.0 {
        return Err(Error::Config(format!(
            "alpha + beta = {} exceeds 1, so t_low would exceed t_high",
            alpha + beta
        )));
    }
    Ok(Thresholds {
        t_low: s_min + range * alpha,
        t_high: s_max - range * beta,
    })
}

/// Checks that `alpha` and `beta` lie in `[0, 1]` and do not cross.
pub fn validate_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    Ok(())
}

/// Strict three-way rule; scores equal to a threshold land in INT4.
pub fn assign_tiers(scores: &[f64], thresholds: Thresholds) -> Vec<Tier> {
    scores
        .iter()
        .map(|&s| {
            if s < thresholds.t_low {
                Tier::Int2
            } else if s > thresholds.t_high {
                Tier::Fp16
            } else {
                Tier::Int4
            }
        })
        .collect()
}

/// Scores, thresholds and tier assignment for one (context, query) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub scores: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t_low: f64,
    pub t_high: f64,
    pub tiers: Vec<Tier>,
    /// Chunks whose embedding had zero norm; their score was replaced.
    pub zero_norm_chunks: Vec<usize>,
    pub zero_norm_query: bool,
}

impl SimilarityReport {
    pub fn from_scores(scores: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let th = compute_thresholds(&scores, alpha, beta)?;
        let (s_min, s_max) = min_max(&scores);
        let tiers = assign_tiers(&scores, th);
        Ok(Self {
            scores,
            s_min,
            s_max,
            alpha,
            beta,
            t_low: th.t_low,
            t_high: th.t_high,
            tiers,
            zero_norm_chunks: Vec::new(),
            zero_norm_query: false,
        })
    }

    pub fn tier_counts(&self) -> [usize; 3] {
        tier_counts(&self.tiers)
    }
}

pub fn tier_counts(tiers: &[Tier]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for t in tiers {
        counts[*t as usize] += 1;
    }
    counts
}

/// Embeds every chunk and the query and returns one similarity per chunk.
///
/// Zero-norm chunks get the minimum of the remaining scores (least relevant);
/// a zero-norm query makes every chunk score 0. Span ids are
/// `{run_id}/chunk/{i}` and `{run_id}/query`.
pub fn score_chunks(
    encoder: &dyn Encoder,
    run_id: &str,
    context: &[String],
    query: &[String],
    chunks: &ChunkSet,
) -> Result<(Vec<f64>, Vec<usize>, bool)> {
    let query_id = format!("{run_id}/query");
    let q = encoder.encode(Span {
        id: &query_id,
        tokens: query,
    })?;
    let embeddings = (0..chunks.num_chunks)
        .into_par_iter()
        .map(|i| {
            let id = format!("{run_id}/chunk/{i}");
            encoder.encode(Span {
                id: &id,
                tokens: &context[chunks.chunk(i)],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if q.is_zero() {
        log::warn!("{run_id}: query embedding has zero norm; all chunks score 0");
        return Ok((vec![0.0; chunks.num_chunks], Vec::new(), true));
    }

    let mut scores = Vec::with_capacity(embeddings.len());
    let mut zero = Vec::new();
    for (i, c) in embeddings.iter().enumerate() {
        match cosine_similarity(&q, c) {
            Ok(s) => scores.push(Some(s)),
            Err(Error::ZeroNorm) => {
                zero.push(i);
                scores.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let fallback = scores
        .iter()
        .flatten()
        .copied()
        .reduce(f64::min)
        .unwrap_or(0.0);
    Ok((
        scores.into_iter().map(|s| s.unwrap_or(fallback)).collect(),
        zero,
        false,
    ))
}

/// Full search: score every chunk, then threshold and assign tiers.
pub fn quantization_search(
    encoder: &dyn Encoder,
    run_id: &str,
    context: &[String],
    query: &[String],
    chunks: &ChunkSet,
    alpha: f64,
    beta: f64,
) -> Result<SimilarityReport> {
    if chunks.num_chunks == 0 {
        return Err(Error::InvalidArgument(
            "context is shorter than one chunk; nothing to search".into(),
        ));
    }
    let (scores, zero_norm_chunks, zero_norm_query) =
        score_chunks(encoder, run_id, context, query, chunks)?;
    let mut report = SimilarityReport::from_scores(scores, alpha, beta)?;
    report.zero_norm_chunks = zero_norm_chunks;
    report.zero_norm_query = zero_norm_query;
    Ok(report)
}

fn min_max(scores: &[f64]) -> (f64, f64) {
    scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        })
}
