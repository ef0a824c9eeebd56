//! Seeded single-layer attention model standing in for a pretrained LLM.
//!
//! Token embeddings plus sinusoidal positions are projected to per-head
//! Q/K/V; the concatenated head outputs form the hidden state and `W_o` maps
//! it to vocabulary logits. Decoding is greedy.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionInstance};
use crate::error::{Error, Result};
use crate::kv_store::ChunkedKVCache;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            embed_dim: 64,
            n_heads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    head_dim: usize,
    token_embeddings: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        let ToyModelConfig {
            vocab_size,
            embed_dim,
            n_heads,
            seed,
        } = config;
        if vocab_size == 0 || embed_dim == 0 || n_heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if embed_dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} is not divisible by n_heads {n_heads}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (embed_dim as f32).sqrt();
        let mut uniform =
            |rows, cols, b: f32| Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-b..b));
        let token_embeddings = uniform(vocab_size, embed_dim, 1.0);
        let w_q = uniform(embed_dim, embed_dim, bound);
        let w_k = uniform(embed_dim, embed_dim, bound);
        let w_v = uniform(embed_dim, embed_dim, bound);
        let w_o = uniform(embed_dim, vocab_size, bound);
        Ok(Self {
            config,
            head_dim: embed_dim / n_heads,
            token_embeddings,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn config(&self) -> ToyModelConfig {
        self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Maps a text token to a vocabulary id.
    pub fn token_id(&self, word: &str) -> u32 {
        (crate::retrieval::fnv1a(0, word.as_bytes()) % self.config.vocab_size as u64) as u32
    }

    /// Token embeddings plus sinusoidal positions starting at `start_pos`.
    pub fn embed(&self, tokens: &[u32], start_pos: usize) -> Matrix {
        let d = self.embed_dim();
        let mut out = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let pos = (start_pos + t) as f64;
            let src = self.token_embeddings.row(tok as usize % self.vocab_size());
            for (c, o) in out.row_mut(t).iter_mut().enumerate() {
                let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
                let pe = if c % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
                *o = src[c] + pe as f32;
            }
        }
        out
    }

    /// Q, K and V for one head.
    pub fn project(&self, x: &Matrix, head: usize) -> Result<(Matrix, Matrix, Matrix)> {
        if head >= self.n_heads() {
            return Err(Error::InvalidArgument(format!("no head {head}")));
        }
        let cols = head * self.head_dim..(head + 1) * self.head_dim;
        Ok((
            x.matmul(&self.w_q.slice_cols(cols.clone()))?,
            x.matmul(&self.w_k.slice_cols(cols.clone()))?,
            x.matmul(&self.w_v.slice_cols(cols))?,
        ))
    }

    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.vocab_size()];
        for (&h, row) in hidden.iter().zip(0..) {
            let h = h as f64;
            for (a, &w) in acc.iter_mut().zip(self.w_o.row(row)) {
                *a += h * w as f64;
            }
        }
        acc.into_iter().map(|a| a as f32).collect()
    }

    /// Greedy choice over the output head.
    pub fn next_token(&self, hidden: &[f32]) -> u32 {
        argmax(&self.logits(hidden))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionPath {
    /// Blocked mixed-precision attention over the arenas.
    #[default]
    Mixed,
    /// Exact attention over the dequantized cache in original order.
    Reference,
}

/// Result of a decode loop.
#[derive(Debug, Clone, Default)]
pub struct Generation {
    /// Token fed in at each step.
    pub inputs: Vec<u32>,
    /// Token produced at each step.
    pub tokens: Vec<u32>,
    pub hidden_states: Vec<Vec<f32>>,
    pub step_times: Vec<Duration>,
}

impl Generation {
    pub fn final_hidden(&self) -> Option<&[f32]> {
        self.hidden_states.last().map(Vec::as_slice)
    }
}

fn decode_step(
    model: &ToyModel,
    caches: &mut [ChunkedKVCache],
    token: u32,
    pos: usize,
    path: AttentionPath,
) -> Result<Vec<f32>> {
    let x = model.embed(&[token], pos);
    let hd = model.head_dim();
    let mut hidden = vec![0.0f32; model.embed_dim()];
    for (h, cache) in caches.iter_mut().enumerate() {
        let (q, k, v) = model.project(&x, h)?;
        cache.append_decode_token(k.row(0), v.row(0))?;
        let out = match path {
            AttentionPath::Mixed => {
                attention::mixed_decode_attention(AttentionInstance::new(&q, cache))?
            }
            AttentionPath::Reference => {
                let (rk, rv) = cache.reconstruct();
                attention::reference_attention(&q, &rk, &rv, None, attention::default_scale(hd))?
            }
        };
        hidden[h * hd..(h + 1) * hd].copy_from_slice(out.row(0));
    }
    Ok(hidden)
}

fn check_caches(model: &ToyModel, caches: &[ChunkedKVCache]) -> Result<()> {
    if caches.len() != model.n_heads() || caches.iter().any(|c| c.head_dim() != model.head_dim()) {
        return Err(Error::shape(format!(
            "{} caches for a model with {} heads of width {}",
            caches.len(),
            model.n_heads(),
            model.head_dim()
        )));
    }
    Ok(())
}

/// Greedy decoding for `steps` steps. Step `s` feeds the previous output
/// (`first_token` at step 0) at position `start_pos + s`, appends its K/V to
/// every head's cache, and emits the argmax of the logits.
pub fn generate(
    model: &ToyModel,
    caches: &mut [ChunkedKVCache],
    first_token: u32,
    start_pos: usize,
    steps: usize,
    path: AttentionPath,
) -> Result<Generation> {
    check_caches(model, caches)?;
    let mut gen = Generation::default();
    let mut token = first_token;
    for s in 0..steps {
        let started = Instant::now();
        let hidden = decode_step(model, caches, token, start_pos + s, path)?;
        let next = model.next_token(&hidden);
        gen.step_times.push(started.elapsed());
        gen.inputs.push(token);
        gen.tokens.push(next);
        gen.hidden_states.push(hidden);
        token = next;
    }
    Ok(gen)
}

/// Teacher-forced decoding: feeds `inputs` regardless of what the model emits.
pub fn replay(
    model: &ToyModel,
    caches: &mut [ChunkedKVCache],
    inputs: &[u32],
    start_pos: usize,
    path: AttentionPath,
) -> Result<Generation> {
    check_caches(model, caches)?;
    let mut gen = Generation::default();
    for (s, &token) in inputs.iter().enumerate() {
        let started = Instant::now();
        let hidden = decode_step(model, caches, token, start_pos + s, path)?;
        let next = model.next_token(&hidden);
        gen.step_times.push(started.elapsed());
        gen.inputs.push(token);
        gen.tokens.push(next);
        gen.hidden_states.push(hidden);
    }
    Ok(gen)
}

/// First step at which two token sequences differ.
pub fn divergence_step(a: &[u32], b: &[u32]) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}
