//! Seeded inputs shared by the kernel benchmarks.

use chunkkv_core::retrieval::{segment_context, Tier};
use chunkkv_core::{build_cache, ChunkedKVCache, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// A cache of `tokens` random K/V rows with tiers cycling INT2, INT4, FP16.
pub fn mixed_cache(tokens: usize, head_dim: usize, chunk_size: usize, seed: u64) -> ChunkedKVCache {
    let k = random_matrix(tokens, head_dim, seed);
    let v = random_matrix(tokens, head_dim, seed + 1);
    let set = segment_context(&vec![(); tokens], chunk_size).expect("non-empty context");
    let tiers: Vec<Tier> = (0..set.num_chunks).map(|i| Tier::ALL[i % 3]).collect();
    build_cache(&k, &v, &tiers, &set, head_dim).expect("consistent shapes")
}
