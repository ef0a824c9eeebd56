//! Decode attention over a tier-contiguous cache, and the exact oracle.
//!
//! [`mixed_decode_attention`] scores the query against each arena separately
//! (INT2, INT4, full precision), concatenates the scores along the token axis,
//! applies `scale`, the mask and a row softmax, then splits the weights back
//! at `len_2` and `len_2 + len_4` and sums the three partial products in that
//! fixed order. Because softmax and the weighted sum are both invariant to a
//! consistent permutation of key/value rows, the result equals ordinary
//! attention over the dequantized cache restored to original order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv_store::ChunkedKVCache;
use crate::tensor::{dot, Matrix};
use crate::toy_model::ToyModel;

/// One decode-attention problem. The mask, if any, is in the cache's logical
/// (reordered) column order; see [`ChunkedKVCache::reorder_mask`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionInstance<'a> {
    pub q: &'a Matrix,
    pub cache: &'a ChunkedKVCache,
    pub mask: Option<&'a Matrix>,
    pub scale: f32,
}

impl<'a> AttentionInstance<'a> {
    pub fn new(q: &'a Matrix, cache: &'a ChunkedKVCache) -> Self {
        Self {
            q,
            cache,
            mask: None,
            scale: default_scale(cache.head_dim()),
        }
    }

    pub fn with_mask(mut self, mask: &'a Matrix) -> Self {
        self.mask = Some(mask);
        self
    }
}

pub fn default_scale(head_dim: usize) -> f32 {
    1.0 / (head_dim as f32).sqrt()
}

/// Numerically stable in-place softmax. A fully masked row becomes all zeros.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn check_mask(mask: Option<&Matrix>, rows: usize, cols: usize) -> Result<()> {
    match mask {
        Some(m) if m.shape() != (rows, cols) => Err(Error::shape(format!(
            "mask is {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        ))),
        _ => Ok(()),
    }
}

pub fn mixed_decode_attention(inst: AttentionInstance<'_>) -> Result<Matrix> {
    mixed_decode_attention_with_weights(inst).map(|(out, _)| out)
}

/// Like [`mixed_decode_attention`], also returning the softmax weights in
/// logical column order.
pub fn mixed_decode_attention_with_weights(
    inst: AttentionInstance<'_>,
) -> Result<(Matrix, Matrix)> {
    let cache = inst.cache;
    let d = cache.head_dim();
    if inst.q.cols() != d {
        return Err(Error::shape(format!(
            "query width {} does not match head_dim {d}",
            inst.q.cols()
        )));
    }
    let total = cache.total_tokens();
    if total == 0 {
        return Err(Error::EmptyCache);
    }
    check_mask(inst.mask, inst.q.rows(), total)?;

    let (len_2, len_4) = (cache.len_2(), cache.len_4());
    let split_4 = len_2 + len_4;
    let scale = inst.scale as f64;
    let mut out = Matrix::zeros(inst.q.rows(), d);
    let mut weights = Matrix::zeros(inst.q.rows(), total);
    let mut att = vec![0.0f64; total];

    for i in 0..inst.q.rows() {
        let q = inst.q.row(i);
        if let Some(k2) = cache.k_int2() {
            k2.row_dots(q, &mut att[..len_2]);
        }
        if let Some(k4) = cache.k_int4() {
            k4.row_dots(q, &mut att[len_2..split_4]);
        }
        cache.k_fp().row_dots(q, &mut att[split_4..]);

        for (j, a) in att.iter_mut().enumerate() {
            *a *= scale;
            if let Some(mask) = inst.mask {
                *a += mask.get(i, j) as f64;
            }
        }
        softmax_in_place(&mut att);

        let mut partials = [vec![0.0f64; d], vec![0.0f64; d], vec![0.0f64; d]];
        if let Some(v2) = cache.v_int2() {
            v2.accumulate_weighted(&att[..len_2], &mut partials[0]);
        }
        if let Some(v4) = cache.v_int4() {
            v4.accumulate_weighted(&att[len_2..split_4], &mut partials[1]);
        }
        cache
            .v_fp()
            .accumulate_weighted(&att[split_4..], &mut partials[2]);

        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (partials[0][c] + partials[1][c] + partials[2][c]) as f32;
        }
        for (w, &a) in weights.row_mut(i).iter_mut().zip(&att) {
            *w = a as f32;
        }
    }
    Ok((out, weights))
}

/// `softmax(scale · q kᵀ + mask) · v`, computed naively left to right with
/// `f64` accumulation.
pub fn reference_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
    scale: f32,
) -> Result<Matrix> {
    reference_attention_with_weights(q, k, v, mask, scale).map(|(out, _)| out)
}

pub fn reference_attention_with_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
    scale: f32,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyCache);
    }
    check_mask(mask, q.rows(), k.rows())?;

    let n = k.rows();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut weights = Matrix::zeros(q.rows(), n);
    let mut s = vec![0.0f64; n];
    let mut acc = vec![0.0f64; v.cols()];
    for i in 0..q.rows() {
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = dot(q.row(i), k.row(j)) * scale as f64 + mask.map_or(0.0, |m| m.get(i, j) as f64);
        }
        softmax_in_place(&mut s);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &p) in s.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += p * x as f64;
            }
        }
        for (o, &a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a as f32;
        }
        for (w, &p) in weights.row_mut(i).iter_mut().zip(&s) {
            *w = p as f32;
        }
    }
    Ok((out, weights))
}

/// Mask with `-inf` above the diagonal for `rows` queries whose first
/// position is `offset` in a sequence of `cols` keys.
pub fn causal_mask(rows: usize, cols: usize, offset: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| {
        if c <= offset + r {
            0.0
        } else {
            f32::NEG_INFINITY
        }
    })
}

/// Unquantized K/V per head, hidden states for every prompt position, and
/// the logits of the last position.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub hidden: Matrix,
    pub first_logits: Vec<f32>,
}

impl PrefillOutput {
    pub fn first_token(&self) -> u32 {
        crate::toy_model::argmax(&self.first_logits)
    }
}

/// Standard causal prefill over `embeddings` (positions already added).
pub fn prefill_attention(embeddings: &Matrix, model: &ToyModel) -> Result<PrefillOutput> {
    if embeddings.cols() != model.embed_dim() {
        return Err(Error::shape(format!(
            "embeddings have width {}, model expects {}",
            embeddings.cols(),
            model.embed_dim()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let n = embeddings.rows();
    let hd = model.head_dim();
    let scale = default_scale(hd) as f64;

    let mut ks = Vec::with_capacity(model.n_heads());
    let mut vs = Vec::with_capacity(model.n_heads());
    let mut hidden = Matrix::zeros(n, model.embed_dim());
    for h in 0..model.n_heads() {
        let (q, k, v) = model.project(embeddings, h)?;
        let rows: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|t| {
                let mut s: Vec<f64> = (0..=t).map(|j| dot(q.row(t), k.row(j)) * scale).collect();
                softmax_in_place(&mut s);
                let mut acc = vec![0.0f64; hd];
                for (j, &p) in s.iter().enumerate() {
                    for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                        *a += p * x as f64;
                    }
                }
                acc.into_iter().map(|a| a as f32).collect()
            })
            .collect();
        for (t, row) in rows.iter().enumerate() {
            hidden.row_mut(t)[h * hd..(h + 1) * hd].copy_from_slice(row);
        }
        ks.push(k);
        vs.push(v);
    }
    let first_logits = model.logits(hidden.row(n - 1));
    Ok(PrefillOutput {
        k: ks,
        v: vs,
        hidden,
        first_logits,
    })
}
