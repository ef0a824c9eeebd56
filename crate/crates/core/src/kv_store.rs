//! Tier-contiguous chunked KV cache for one (layer, head).
//!
//! At the end of prefill the context chunks are grouped by tier, stably, so
//! the logical token sequence seen by attention is
//!
//! ```text
//! INT2 chunks | INT4 chunks | FP16 chunks | context tail | appended tokens
//! ```
//!
//! `perm[p]` is the original index of the chunk stored at position `p`.
//! The two quantized tiers each live in one packed arena per tensor; the
//! full-precision region holds FP16-tier chunks, then the tail, then every
//! token appended after prefill. Positional information is expected to be
//! baked into K before caching, so moving rows does not change their meaning.
//!
//! Full-precision rows are held as `f32`; memory accounting charges them at
//! two bytes per element, the width they would occupy as FP16.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::quantizer::{self, read_f32, read_u32, Bitwidth, QuantizedBlock};
use crate::retrieval::{ChunkSet, Tier};
use crate::tensor::Matrix;

/// Storage of one quantized-tier arena.
#[derive(Debug, Clone, PartialEq)]
pub enum Arena {
    Packed(QuantizedBlock),
    /// Reordered but not quantized; used to isolate the effect of reordering.
    Dense(Matrix),
}

impl Arena {
    pub fn rows(&self) -> usize {
        match self {
            Arena::Packed(b) => b.rows(),
            Arena::Dense(m) => m.rows(),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Arena::Packed(b) => quantizer::dequantize(b),
            Arena::Dense(m) => m.clone(),
        }
    }

    pub fn row_dots(&self, x: &[f32], out: &mut [f64]) {
        match self {
            Arena::Packed(b) => b.row_dots(x, out),
            Arena::Dense(m) => m.row_dots(x, out),
        }
    }

    pub fn accumulate_weighted(&self, weights: &[f64], out: &mut [f64]) {
        match self {
            Arena::Packed(b) => b.accumulate_weighted(weights, out),
            Arena::Dense(m) => m.accumulate_weighted(weights, out),
        }
    }

    /// `a · selfᵀ`
    pub fn scores(&self, a: &Matrix) -> Result<Matrix> {
        match self {
            Arena::Packed(b) => quantizer::fqm(a, b, true),
            Arena::Dense(m) => a.matmul_transposed(m),
        }
    }

    /// `a · self`
    pub fn mix(&self, a: &Matrix) -> Result<Matrix> {
        match self {
            Arena::Packed(b) => quantizer::fqm(a, b, false),
            Arena::Dense(m) => a.matmul(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    #[default]
    Quantize,
    /// Group and reorder chunks by tier but keep every value at full precision.
    ReorderOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedKVCache {
    chunk_size: usize,
    head_dim: usize,
    group_size: usize,
    perm: Vec<usize>,
    tiers: Vec<Tier>,
    k_q2: Option<Arena>,
    v_q2: Option<Arena>,
    k_q4: Option<Arena>,
    v_q4: Option<Arena>,
    k_fp: Matrix,
    v_fp: Matrix,
    len_2: usize,
    len_4: usize,
    fp_chunk_len: usize,
    tail_len: usize,
}

/// Byte accounting for a cache (or a sum over caches).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MemoryReport {
    /// Packed codes plus scales and zero-points of the INT2 arenas (K and V).
    pub int2_bytes: usize,
    pub int4_bytes: usize,
    /// Full-precision region at two bytes per element.
    pub fp16_bytes: usize,
    /// Cache header and permutation.
    pub metadata_bytes: usize,
    /// The same tokens stored entirely as FP16.
    pub fp16_baseline_bytes: usize,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> usize {
        self.int2_bytes + self.int4_bytes + self.fp16_bytes + self.metadata_bytes
    }

    pub fn ratio(&self) -> f64 {
        if self.fp16_baseline_bytes == 0 {
            return 1.0;
        }
        self.total_bytes() as f64 / self.fp16_baseline_bytes as f64
    }
}

impl std::ops::AddAssign for MemoryReport {
    fn add_assign(&mut self, rhs: Self) {
        self.int2_bytes += rhs.int2_bytes;
        self.int4_bytes += rhs.int4_bytes;
        self.fp16_bytes += rhs.fp16_bytes;
        self.metadata_bytes += rhs.metadata_bytes;
        self.fp16_baseline_bytes += rhs.fp16_baseline_bytes;
    }
}

impl std::iter::Sum for MemoryReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(MemoryReport::default(), |mut a, b| {
            a += b;
            a
        })
    }
}

/// Stable grouping of chunk indices: INT2, then INT4, then FP16.
pub fn tier_permutation(tiers: &[Tier]) -> Vec<usize> {
    Tier::ALL
        .iter()
        .flat_map(|&t| (0..tiers.len()).filter(move |&i| tiers[i] == t))
        .collect()
}

pub fn build_cache(
    k: &Matrix,
    v: &Matrix,
    tiers: &[Tier],
    chunk_set: &ChunkSet,
    group_size: usize,
) -> Result<ChunkedKVCache> {
    build_cache_with(k, v, tiers, chunk_set, group_size, QuantMode::Quantize)
}

pub fn build_cache_with(
    k: &Matrix,
    v: &Matrix,
    tiers: &[Tier],
    chunk_set: &ChunkSet,
    group_size: usize,
    mode: QuantMode,
) -> Result<ChunkedKVCache> {
    if k.shape() != v.shape() {
        return Err(Error::shape(format!(
            "K is {:?} but V is {:?}",
            k.shape(),
            v.shape()
        )));
    }
    if k.rows() != chunk_set.context_len {
        return Err(Error::shape(format!(
            "K/V hold {} tokens but the chunk set covers {}",
            k.rows(),
            chunk_set.context_len
        )));
    }
    if tiers.len() != chunk_set.num_chunks {
        return Err(Error::shape(format!(
            "{} tiers for {} chunks",
            tiers.len(),
            chunk_set.num_chunks
        )));
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument(
            "group_size must be at least 1".into(),
        ));
    }
    let head_dim = k.cols();
    if head_dim == 0 {
        return Err(Error::shape("head_dim must be at least 1"));
    }

    let perm = tier_permutation(tiers);
    let gather = |src: &Matrix, tier: Tier| -> Matrix {
        let mut out = Matrix::zeros(0, head_dim);
        for &c in perm.iter().filter(|&&c| tiers[c] == tier) {
            out.vstack(&src.slice_rows(chunk_set.chunk(c)))
                .expect("rows share head_dim");
        }
        out
    };
    let arena = |src: &Matrix, tier: Tier, bw: Bitwidth| -> Result<Option<Arena>> {
        let rows = gather(src, tier);
        if rows.rows() == 0 {
            return Ok(None);
        }
        Ok(Some(match mode {
            QuantMode::Quantize => Arena::Packed(quantizer::quantize(&rows, bw, group_size)?),
            QuantMode::ReorderOnly => Arena::Dense(rows),
        }))
    };

    let mut k_fp = gather(k, Tier::Fp16);
    let mut v_fp = gather(v, Tier::Fp16);
    let fp_chunk_len = k_fp.rows();
    k_fp.vstack(&k.slice_rows(chunk_set.tail()))?;
    v_fp.vstack(&v.slice_rows(chunk_set.tail()))?;

    let count = |t: Tier| tiers.iter().filter(|&&x| x == t).count() * chunk_set.chunk_size;
    Ok(ChunkedKVCache {
        chunk_size: chunk_set.chunk_size,
        head_dim,
        group_size,
        k_q2: arena(k, Tier::Int2, Bitwidth::Int2)?,
        v_q2: arena(v, Tier::Int2, Bitwidth::Int2)?,
        k_q4: arena(k, Tier::Int4, Bitwidth::Int4)?,
        v_q4: arena(v, Tier::Int4, Bitwidth::Int4)?,
        k_fp,
        v_fp,
        len_2: count(Tier::Int2),
        len_4: count(Tier::Int4),
        fp_chunk_len,
        tail_len: chunk_set.tail_len(),
        perm,
        tiers: tiers.to_vec(),
    })
}

const CACHE_MAGIC: &[u8; 4] = b"CKV1";
const HEADER_WORDS: usize = 8;

const ARENA_ABSENT: u32 = 0;
const ARENA_PACKED: u32 = 1;
const ARENA_DENSE: u32 = 2;

impl ChunkedKVCache {
    /// Empty cache with no context; behaves as a plain full-precision rolling cache.
    pub fn empty(head_dim: usize, chunk_size: usize, group_size: usize) -> Self {
        Self {
            chunk_size,
            head_dim,
            group_size,
            perm: Vec::new(),
            tiers: Vec::new(),
            k_q2: None,
            v_q2: None,
            k_q4: None,
            v_q4: None,
            k_fp: Matrix::zeros(0, head_dim),
            v_fp: Matrix::zeros(0, head_dim),
            len_2: 0,
            len_4: 0,
            fp_chunk_len: 0,
            tail_len: 0,
        }
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_chunks(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Tier of each chunk in original order.
    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    pub fn len_2(&self) -> usize {
        self.len_2
    }

    pub fn len_4(&self) -> usize {
        self.len_4
    }

    pub fn len_fp(&self) -> usize {
        self.k_fp.rows()
    }

    pub fn tail_len(&self) -> usize {
        self.tail_len
    }

    /// Tokens appended after prefill.
    pub fn appended_len(&self) -> usize {
        self.len_fp() - self.fp_chunk_len - self.tail_len
    }

    pub fn context_len(&self) -> usize {
        self.num_chunks() * self.chunk_size + self.tail_len
    }

    pub fn total_tokens(&self) -> usize {
        self.len_2 + self.len_4 + self.len_fp()
    }

    pub fn k_int2(&self) -> Option<&Arena> {
        self.k_q2.as_ref()
    }

    pub fn v_int2(&self) -> Option<&Arena> {
        self.v_q2.as_ref()
    }

    pub fn k_int4(&self) -> Option<&Arena> {
        self.k_q4.as_ref()
    }

    pub fn v_int4(&self) -> Option<&Arena> {
        self.v_q4.as_ref()
    }

    pub fn k_fp(&self) -> &Matrix {
        &self.k_fp
    }

    pub fn v_fp(&self) -> &Matrix {
        &self.v_fp
    }

    /// Appends one token to the full-precision region.
    pub fn append_decode_token(&mut self, k_vec: &[f32], v_vec: &[f32]) -> Result<()> {
        if k_vec.len() != self.head_dim || v_vec.len() != self.head_dim {
            return Err(Error::shape(format!(
                "appending K/V of length {}/{} to a cache with head_dim {}",
                k_vec.len(),
                v_vec.len(),
                self.head_dim
            )));
        }
        self.k_fp.push_row(k_vec)?;
        self.v_fp.push_row(v_vec)?;
        Ok(())
    }

    /// Original sequence position of every slot in the logical (reordered)
    /// sequence. Appended tokens follow the context.
    pub fn logical_positions(&self) -> Vec<usize> {
        let cs = self.chunk_size;
        let mut out = Vec::with_capacity(self.total_tokens());
        for &c in &self.perm {
            out.extend(c * cs..(c + 1) * cs);
        }
        let context = self.context_len();
        out.extend(self.num_chunks() * cs..context);
        out.extend(context..context + self.appended_len());
        out
    }

    /// Reorders mask columns given in original sequence order into the
    /// cache's logical order.
    pub fn reorder_mask(&self, mask: &Matrix) -> Result<Matrix> {
        if mask.cols() != self.total_tokens() {
            return Err(Error::shape(format!(
                "mask has {} columns, cache holds {} tokens",
                mask.cols(),
                self.total_tokens()
            )));
        }
        let pos = self.logical_positions();
        Ok(Matrix::from_fn(mask.rows(), mask.cols(), |r, c| {
            mask.get(r, pos[c])
        }))
    }

    /// Dequantized K and V in logical order.
    pub fn logical_kv(&self) -> (Matrix, Matrix) {
        let mut k = Matrix::zeros(0, self.head_dim);
        let mut v = Matrix::zeros(0, self.head_dim);
        for (ka, va) in [(&self.k_q2, &self.v_q2), (&self.k_q4, &self.v_q4)] {
            if let (Some(ka), Some(va)) = (ka, va) {
                k.vstack(&ka.to_dense()).expect("arena width is head_dim");
                v.vstack(&va.to_dense()).expect("arena width is head_dim");
            }
        }
        k.vstack(&self.k_fp).expect("fp width is head_dim");
        v.vstack(&self.v_fp).expect("fp width is head_dim");
        (k, v)
    }

    /// Dequantized K and V scattered back to original sequence order.
    pub fn reconstruct(&self) -> (Matrix, Matrix) {
        let (lk, lv) = self.logical_kv();
        let mut k = Matrix::zeros(lk.rows(), self.head_dim);
        let mut v = Matrix::zeros(lv.rows(), self.head_dim);
        for (slot, pos) in self.logical_positions().into_iter().enumerate() {
            k.row_mut(pos).copy_from_slice(lk.row(slot));
            v.row_mut(pos).copy_from_slice(lv.row(slot));
        }
        (k, v)
    }

    pub fn memory_footprint(&self) -> MemoryReport {
        let quantized = |arenas: [&Option<Arena>; 2]| -> (usize, usize) {
            let mut packed = 0;
            let mut dense = 0;
            for a in arenas.into_iter().flatten() {
                match a {
                    Arena::Packed(b) => packed += b.packed_bytes() + b.group_metadata_bytes(),
                    Arena::Dense(m) => dense += m.rows() * m.cols() * 2,
                }
            }
            (packed, dense)
        };
        let (int2_bytes, dense2) = quantized([&self.k_q2, &self.v_q2]);
        let (int4_bytes, dense4) = quantized([&self.k_q4, &self.v_q4]);
        MemoryReport {
            int2_bytes,
            int4_bytes,
            fp16_bytes: dense2 + dense4 + 2 * self.len_fp() * self.head_dim * 2,
            metadata_bytes: HEADER_WORDS * 4 + self.perm.len() * 4,
            fp16_baseline_bytes: 2 * self.total_tokens() * self.head_dim * 2,
        }
    }

    /// Binary layout, all little-endian:
    ///
    /// ```text
    /// "CKV1"
    /// u32 × 8   num_chunks chunk_size head_dim len_2 len_4 len_fp tail_len group_size
    /// u32 × N   perm
    /// 4 arenas  k_int2 v_int2 k_int4 v_int4, each: u32 kind, u32 byte length, payload
    ///           (kind 0 absent, 1 quantized block, 2 dense f32 rows)
    /// f32 rows  k_fp then v_fp, len_fp × head_dim each
    /// ```
    ///
    /// Each tier's bytes therefore form one contiguous range.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        for v in [
            self.num_chunks(),
            self.chunk_size,
            self.head_dim,
            self.len_2,
            self.len_4,
            self.len_fp(),
            self.tail_len,
            self.group_size,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &p in &self.perm {
            w.write_all(&(p as u32).to_le_bytes())?;
        }
        for arena in [&self.k_q2, &self.v_q2, &self.k_q4, &self.v_q4] {
            match arena {
                None => {
                    w.write_all(&ARENA_ABSENT.to_le_bytes())?;
                    w.write_all(&0u32.to_le_bytes())?;
                }
                Some(Arena::Packed(b)) => {
                    w.write_all(&ARENA_PACKED.to_le_bytes())?;
                    w.write_all(&(b.serialized_len() as u32).to_le_bytes())?;
                    b.write_to(w)?;
                }
                Some(Arena::Dense(m)) => {
                    w.write_all(&ARENA_DENSE.to_le_bytes())?;
                    w.write_all(&((m.as_slice().len() * 4) as u32).to_le_bytes())?;
                    write_f32s(w, m.as_slice())?;
                }
            }
        }
        write_f32s(w, self.k_fp.as_slice())?;
        write_f32s(w, self.v_fp.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let cache = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(cache)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("bad cache magic".into()));
        }
        let mut header = [0usize; HEADER_WORDS];
        for h in &mut header {
            *h = read_u32(r)? as usize;
        }
        let [num_chunks, chunk_size, head_dim, len_2, len_4, len_fp, tail_len, group_size] = header;
        if chunk_size == 0 || head_dim == 0 || group_size == 0 {
            return Err(Error::Format(
                "zero chunk_size, head_dim or group_size".into(),
            ));
        }
        let perm = (0..num_chunks)
            .map(|_| read_u32(r).map(|p| p as usize))
            .collect::<Result<Vec<_>>>()?;

        let mut seen = vec![false; num_chunks];
        for &p in &perm {
            if p >= num_chunks || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format("perm is not a permutation".into()));
            }
        }
        if len_2 % chunk_size != 0 || len_4 % chunk_size != 0 {
            return Err(Error::Format(
                "quantized lengths are not whole chunks".into(),
            ));
        }
        let (n2, n4) = (len_2 / chunk_size, len_4 / chunk_size);
        if n2 + n4 > num_chunks {
            return Err(Error::Format("more quantized chunks than chunks".into()));
        }
        let fp_chunk_len = (num_chunks - n2 - n4) * chunk_size;
        if fp_chunk_len + tail_len > len_fp {
            return Err(Error::Format("full-precision region too short".into()));
        }
        let mut tiers = vec![Tier::Fp16; num_chunks];
        for (i, &c) in perm.iter().enumerate() {
            tiers[c] = if i < n2 {
                Tier::Int2
            } else if i < n2 + n4 {
                Tier::Int4
            } else {
                Tier::Fp16
            };
        }
        if tier_permutation(&tiers) != perm {
            return Err(Error::Format("perm is not a stable tier grouping".into()));
        }

        let mut read_arena = |expected_rows: usize, bw: Bitwidth| -> Result<Option<Arena>> {
            let kind = read_u32(r)?;
            let len = read_u32(r)? as usize;
            let mut payload = vec![0u8; len];
            r.read_exact(&mut payload)
                .map_err(|e| Error::Format(format!("truncated arena: {e}")))?;
            let arena = match kind {
                ARENA_ABSENT if len == 0 => None,
                ARENA_PACKED => {
                    let b = QuantizedBlock::from_bytes(&payload)?;
                    if b.bitwidth() != bw || b.cols() != head_dim || b.group_size() != group_size {
                        return Err(Error::Format(
                            "arena block does not match the header".into(),
                        ));
                    }
                    Some(Arena::Packed(b))
                }
                ARENA_DENSE if len % (4 * head_dim) == 0 => {
                    let vals = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                        .collect::<Vec<_>>();
                    Some(Arena::Dense(Matrix::from_vec(
                        len / (4 * head_dim),
                        head_dim,
                        vals,
                    )?))
                }
                _ => {
                    return Err(Error::Format(format!(
                        "bad arena kind {kind} / length {len}"
                    )))
                }
            };
            let rows = arena.as_ref().map_or(0, Arena::rows);
            if rows != expected_rows {
                return Err(Error::Format(format!(
                    "arena holds {rows} rows, header says {expected_rows}"
                )));
            }
            Ok(arena)
        };
        let k_q2 = read_arena(len_2, Bitwidth::Int2)?;
        let v_q2 = read_arena(len_2, Bitwidth::Int2)?;
        let k_q4 = read_arena(len_4, Bitwidth::Int4)?;
        let v_q4 = read_arena(len_4, Bitwidth::Int4)?;

        let mut read_matrix = |rows: usize| -> Result<Matrix> {
            let vals = (0..rows * head_dim)
                .map(|_| read_f32(r))
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_vec(rows, head_dim, vals)
        };
        let k_fp = read_matrix(len_fp)?;
        let v_fp = read_matrix(len_fp)?;

        Ok(Self {
            chunk_size,
            head_dim,
            group_size,
            perm,
            tiers,
            k_q2,
            v_q2,
            k_q4,
            v_q4,
            k_fp,
            v_fp,
            len_2,
            len_4,
            fp_chunk_len,
            tail_len,
        })
    }
}

fn write_f32s<W: Write>(w: &mut W, vals: &[f32]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::segment_context;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kv(seed: u64, tokens: usize, dim: usize) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix::from_fn(tokens, dim, |_, _| rng.gen_range(-2.0f32..2.0));
        (m(), m())
    }

    fn chunk_set(tokens: usize, cs: usize) -> ChunkSet {
        segment_context(&vec![0u8; tokens], cs).unwrap()
    }

    #[test]
    fn all_fp16_is_identity() {
        let (k, v) = random_kv(1, 70, 8);
        let cs = chunk_set(70, 16);
        let cache = build_cache(&k, &v, &[Tier::Fp16; 4], &cs, 8).unwrap();
        assert_eq!(cache.perm(), &[0, 1, 2, 3]);
        assert!(cache.k_int2().is_none() && cache.k_int4().is_none());
        assert_eq!(cache.k_fp(), &k);
        assert_eq!(cache.v_fp(), &v);
        assert_eq!(cache.len_fp(), 70);
        assert_eq!(cache.tail_len(), 6);
    }

    #[test]
    fn mixed_tiers_permutation() {
        let (k, v) = random_kv(2, 4 * 8, 4);
        let cs = chunk_set(32, 8);
        let tiers = [Tier::Int2, Tier::Fp16, Tier::Int2, Tier::Int4];
        let cache = build_cache(&k, &v, &tiers, &cs, 4).unwrap();
        assert_eq!(cache.perm(), &[0, 2, 3, 1]);
        assert_eq!(cache.len_2(), 16);
        assert_eq!(cache.len_4(), 8);
        assert_eq!(cache.len_fp(), 8);
        assert_eq!(cache.k_fp(), &k.slice_rows(8..16));
        let pos = cache.logical_positions();
        assert_eq!(&pos[..8], &(0..8).collect::<Vec<_>>()[..]);
        assert_eq!(&pos[8..16], &(16..24).collect::<Vec<_>>()[..]);
        assert_eq!(&pos[24..], &(8..16).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn tail_only_context() {
        let (k, v) = random_kv(3, 10, 4);
        let cs = chunk_set(10, 32);
        let cache = build_cache(&k, &v, &[], &cs, 4).unwrap();
        assert_eq!((cache.len_2(), cache.len_4(), cache.len_fp()), (0, 0, 10));
        assert_eq!(cache.k_fp(), &k);
        assert_eq!(cache.reconstruct(), (k, v));
    }

    #[test]
    fn build_rejects_mismatches() {
        let (k, v) = random_kv(4, 32, 4);
        let cs = chunk_set(32, 8);
        assert!(build_cache(&k, &v, &[Tier::Fp16; 3], &cs, 4).is_err());
        assert!(build_cache(&k, &v, &[Tier::Fp16; 4], &chunk_set(40, 8), 4).is_err());
        assert!(build_cache(&k, &v.slice_rows(0..31), &[Tier::Fp16; 4], &cs, 4).is_err());
        assert!(build_cache(&k, &v, &[Tier::Fp16; 4], &cs, 0).is_err());
    }

    #[test]
    fn decode_appends_only_touch_fp_region() {
        let (k, v) = random_kv(5, 64, 8);
        let cs = chunk_set(64, 16);
        let tiers = [Tier::Int2, Tier::Int4, Tier::Int2, Tier::Fp16];
        let mut cache = build_cache(&k, &v, &tiers, &cs, 8).unwrap();
        let before = cache.clone();
        cache.append_decode_token(&[0.5; 8], &[0.25; 8]).unwrap();
        assert_eq!(cache.len_fp(), before.len_fp() + 1);
        assert_eq!(cache.len_2(), before.len_2());
        assert_eq!(cache.k_int2(), before.k_int2());
        for i in 0..127 {
            cache
                .append_decode_token(&[i as f32; 8], &[0.0; 8])
                .unwrap();
        }
        assert_eq!(cache.appended_len(), 128);
        assert_eq!(cache.len_fp(), before.len_fp() + 128);
        assert!(cache.append_decode_token(&[0.0; 7], &[0.0; 8]).is_err());
        let (rk, _) = cache.reconstruct();
        assert_eq!(rk.row(64 + 127), &[126.0; 8]);
    }

    #[test]
    fn empty_cache_is_rolling_fp16() {
        let mut cache = ChunkedKVCache::empty(4, 32, 4);
        assert_eq!(cache.total_tokens(), 0);
        cache.append_decode_token(&[1.0; 4], &[2.0; 4]).unwrap();
        cache.append_decode_token(&[3.0; 4], &[4.0; 4]).unwrap();
        assert_eq!(cache.len_fp(), 2);
        assert_eq!(cache.logical_positions(), vec![0, 1]);
        let mem = cache.memory_footprint();
        assert_eq!(mem.fp16_bytes, mem.fp16_baseline_bytes);
    }

    #[test]
    fn memory_all_fp16_ratio() {
        let (k, v) = random_kv(6, 96, 64);
        let cache = build_cache(&k, &v, &[Tier::Fp16; 3], &chunk_set(96, 32), 64).unwrap();
        let m = cache.memory_footprint();
        assert_eq!(m.fp16_baseline_bytes, 96 * 64 * 2 * 2);
        assert_eq!(m.metadata_bytes, 32 + 12);
        let expected = 1.0 + m.metadata_bytes as f64 / m.fp16_baseline_bytes as f64;
        assert_eq!(m.ratio(), expected);
    }

    #[test]
    fn memory_all_int2_closed_form() {
        let (tokens, dim) = (128, 64);
        let (k, v) = random_kv(7, tokens, dim);
        let cache = build_cache(&k, &v, &[Tier::Int2; 4], &chunk_set(tokens, 32), dim).unwrap();
        let m = cache.memory_footprint();
        // Per tensor: tokens * dim * 2 bits packed + one (scale, zero) pair per row.
        let packed = 2 * (tokens * dim * 2 / 8);
        let groups = 2 * tokens * 8;
        assert_eq!(m.int2_bytes, packed + groups);
        assert_eq!(packed as f64 / m.fp16_baseline_bytes as f64, 2.0 / 16.0);
    }

    #[test]
    fn serialization_sections_are_contiguous() {
        let (k, v) = random_kv(8, 40, 4);
        let cs = chunk_set(40, 8);
        let tiers = [Tier::Int4, Tier::Int2, Tier::Fp16, Tier::Int2, Tier::Int4];
        let cache = build_cache(&k, &v, &tiers, &cs, 4).unwrap();
        let bytes = cache.to_bytes();
        let header = 4 + 8 * 4 + 5 * 4;
        let word =
            |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        // k_int2 immediately followed by v_int2, then the INT4 pair.
        let mut off = header;
        for expected_kind in [1, 1, 1, 1] {
            assert_eq!(word(off), expected_kind);
            off += 8 + word(off + 4);
        }
        assert_eq!(bytes.len() - off, 2 * cache.len_fp() * 4 * 4);
        assert_eq!(ChunkedKVCache::from_bytes(&bytes).unwrap(), cache);
        assert!(ChunkedKVCache::from_bytes(&bytes[1..]).is_err());
        assert!(ChunkedKVCache::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn reorder_only_keeps_values() {
        let (k, v) = random_kv(9, 48, 8);
        let cs = chunk_set(48, 16);
        let tiers = [Tier::Fp16, Tier::Int2, Tier::Int4];
        let cache = build_cache_with(&k, &v, &tiers, &cs, 8, QuantMode::ReorderOnly).unwrap();
        assert_eq!(cache.reconstruct(), (k.clone(), v.clone()));
        let back = ChunkedKVCache::from_bytes(&cache.to_bytes()).unwrap();
        assert_eq!(back, cache);
    }

    fn tier_strategy(n: usize) -> impl Strategy<Value = Vec<Tier>> {
        prop::collection::vec(prop::sample::select(Tier::ALL.to_vec()), n)
    }

    proptest! {
        #[test]
        fn perm_is_stable_grouping(tiers in (0usize..40).prop_flat_map(tier_strategy)) {
            let perm = tier_permutation(&tiers);
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..tiers.len()).collect::<Vec<_>>());
            for t in Tier::ALL {
                let sub: Vec<usize> = perm.iter().copied().filter(|&c| tiers[c] == t).collect();
                prop_assert!(sub.windows(2).all(|w| w[0] < w[1]));
            }
            // Tiers are contiguous along perm.
            let along: Vec<Tier> = perm.iter().map(|&c| tiers[c]).collect();
            prop_assert!(along.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn reconstruction_error_bounded(
            seed in any::<u64>(),
            (n, tiers) in (1usize..10).prop_flat_map(|n| (Just(n), tier_strategy(n))),
            tail in 0usize..8,
            gs in prop::sample::select(vec![1usize, 4, 8, 16]),
        ) {
            let cs = 8;
            let tokens = n * cs + tail;
            let (k, v) = random_kv(seed, tokens, 16);
            let cache = build_cache(&k, &v, &tiers, &chunk_set(tokens, cs), gs).unwrap();
            let (rk, rv) = cache.reconstruct();
            for (orig, rec) in [(&k, &rk), (&v, &rv)] {
                for t in 0..tokens {
                    let tier = if t < n * cs { tiers[t / cs] } else { Tier::Fp16 };
                    for d in 0..16 {
                        let err = (orig.get(t, d) - rec.get(t, d)).abs();
                        if tier == Tier::Fp16 {
                            prop_assert_eq!(err, 0.0);
                        } else {
                            // Group range bounded by 4, so scale/2 <= 4 / (2 * levels).
                            let levels = if tier == Tier::Int2 { 3.0 } else { 15.0 };
                            let row = orig.row(t);
                            let g0 = d / gs * gs;
                            let grp = &row[g0..(g0 + gs).min(16)];
                            let lo = grp.iter().copied().fold(f32::INFINITY, f32::min);
                            let hi = grp.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            prop_assert!(err <= (hi - lo) / (2.0 * levels) + 1e-5);
                        }
                    }
                }
            }
        }

        #[test]
        fn demotion_never_grows_memory(
            seed in any::<u64>(),
            (n, tiers) in (1usize..12).prop_flat_map(|n| (Just(n), tier_strategy(n))),
            pick in any::<prop::sample::Index>(),
            gs in prop::sample::select(vec![8usize, 16, 32]),
        ) {
            let cs = 8;
            let tokens = n * cs + 3;
            let (k, v) = random_kv(seed, tokens, 32);
            let set = chunk_set(tokens, cs);
            let before = build_cache(&k, &v, &tiers, &set, gs).unwrap().memory_footprint();
            let i = pick.index(n);
            let mut demoted = tiers.clone();
            demoted[i] = match tiers[i] {
                Tier::Fp16 => Tier::Int4,
                _ => Tier::Int2,
            };
            let after = build_cache(&k, &v, &demoted, &set, gs).unwrap().memory_footprint();
            prop_assert!(after.total_bytes() <= before.total_bytes());
            prop_assert_eq!(after.fp16_baseline_bytes, before.fp16_baseline_bytes);
        }
    }
}
