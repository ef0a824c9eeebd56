//! Per-group asymmetric min-max quantization to 2 or 4 bits.
//!
//! Groups run along the column axis of each row: row `r` owns groups
//! `r * groups_per_row .. (r + 1) * groups_per_row`, the last one possibly
//! shorter than `group_size`. For a group with range `[m, M]`:
//!
//! ```text
//! scale = (M - m) / (2^b - 1)          (0 when M == m)
//! code  = clamp(floor((x - m) / scale + 1/2), 0, 2^b - 1)
//! x'    = scale * code + m
//! ```
//!
//! Codes are packed row-major into little-endian `u32` words, the first
//! element in the least significant bits. Since both bitwidths divide 32, a
//! code never straddles two words.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bitwidth {
    Int2,
    Int4,
}

impl Bitwidth {
    #[inline]
    pub const fn bits(self) -> u32 {
        match self {
            Bitwidth::Int2 => 2,
            Bitwidth::Int4 => 4,
        }
    }

    #[inline]
    pub const fn max_code(self) -> u32 {
        (1 << self.bits()) - 1
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(Bitwidth::Int2),
            4 => Ok(Bitwidth::Int4),
            other => Err(Error::InvalidArgument(format!(
                "unsupported bitwidth {other}, expected 2 or 4"
            ))),
        }
    }
}

/// Bit-packed integer matrix with per-group scale and zero-point.
///
/// Immutable once built; `dequant(code, g) = scales[g] * code + zero_points[g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    rows: usize,
    cols: usize,
    bitwidth: Bitwidth,
    group_size: usize,
    packed: Vec<u32>,
    scales: Vec<f32>,
    zero_points: Vec<f32>,
}

/// Number of `u32` words needed for `len` codes at `bitwidth`.
pub fn packed_len(len: usize, bitwidth: Bitwidth) -> usize {
    (len * bitwidth.bits() as usize).div_ceil(32)
}

/// Packs codes into little-endian words. Codes must fit in `bitwidth` bits.
pub fn pack_codes(codes: &[u8], bitwidth: Bitwidth) -> Vec<u32> {
    let bits = bitwidth.bits() as usize;
    let per_word = 32 / bits;
    let mut words = vec![0u32; packed_len(codes.len(), bitwidth)];
    for (i, &code) in codes.iter().enumerate() {
        debug_assert!(code as u32 <= bitwidth.max_code());
        words[i / per_word] |= (code as u32) << ((i % per_word) * bits);
    }
    words
}

/// Inverse of [`pack_codes`] for the first `len` codes.
pub fn unpack_codes(words: &[u32], bitwidth: Bitwidth, len: usize) -> Vec<u8> {
    let bits = bitwidth.bits() as usize;
    let per_word = 32 / bits;
    let mask = bitwidth.max_code();
    (0..len)
        .map(|i| ((words[i / per_word] >> ((i % per_word) * bits)) & mask) as u8)
        .collect()
}

/// Quantizes `matrix` group-wise along each row.
pub fn quantize(matrix: &Matrix, bitwidth: Bitwidth, group_size: usize) -> Result<QuantizedBlock> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot quantize an empty {rows}x{cols} matrix"
        )));
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument(
            "group_size must be at least 1".into(),
        ));
    }
    if let Some(index) = matrix.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }

    let groups_per_row = cols.div_ceil(group_size);
    let levels = bitwidth.max_code() as f64;
    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut zero_points = Vec::with_capacity(rows * groups_per_row);
    let mut codes = Vec::with_capacity(rows * cols);

    for r in 0..rows {
        for group in matrix.row(r).chunks(group_size) {
            let (lo, hi) = group
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
            let range = hi as f64 - lo as f64;
            let scale = scale_below(range / levels);
            zero_points.push(lo);
            if scale == 0.0 {
                scales.push(0.0);
                codes.extend(std::iter::repeat(0u8).take(group.len()));
                continue;
            }
            scales.push(scale);
            // Codes are chosen against the stored scale, which never exceeds
            // the exact one, so the half-step bound holds for the stored
            // parameters and not just in exact arithmetic.
            codes.extend(group.iter().map(|&x| {
                let t = (x as f64 - lo as f64) / scale as f64;
                (t + 0.5).floor().clamp(0.0, levels) as u8
            }));
        }
    }

    Ok(QuantizedBlock {
        rows,
        cols,
        bitwidth,
        group_size,
        packed: pack_codes(&codes, bitwidth),
        scales,
        zero_points,
    })
}

/// Largest `f32` not above `x` (for `x >= 0`).
fn scale_below(x: f64) -> f32 {
    let s = x as f32;
    if s as f64 > x && s > 0.0 {
        f32::from_bits(s.to_bits() - 1)
    } else {
        s
    }
}

/// Element-wise `scales[g] * code + zero_points[g]`.
pub fn dequantize(block: &QuantizedBlock) -> Matrix {
    let mut out = Matrix::zeros(block.rows, block.cols);
    for r in 0..block.rows {
        block.dequantize_row_into(r, out.row_mut(r));
    }
    out
}

/// `a · dequantize(block)` or, with `transpose_block`, `a · dequantize(block)ᵀ`.
///
/// Rows of the block are dequantized on the fly; nothing of the block's size
/// is materialized. Accumulation is in `f64`.
pub fn fqm(a: &Matrix, block: &QuantizedBlock, transpose_block: bool) -> Result<Matrix> {
    if transpose_block {
        if a.cols() != block.cols {
            return Err(Error::shape(format!(
                "fqm: {}x{} by transposed {}x{} block",
                a.rows(),
                a.cols(),
                block.rows,
                block.cols
            )));
        }
        let mut out = Matrix::zeros(a.rows(), block.rows);
        let mut acc = vec![0.0f64; block.rows];
        for i in 0..a.rows() {
            block.row_dots(a.row(i), &mut acc);
            for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
        Ok(out)
    } else {
        if a.cols() != block.rows {
            return Err(Error::shape(format!(
                "fqm: {}x{} by {}x{} block",
                a.rows(),
                a.cols(),
                block.rows,
                block.cols
            )));
        }
        let mut out = Matrix::zeros(a.rows(), block.cols);
        let mut weights = vec![0.0f64; block.rows];
        let mut acc = vec![0.0f64; block.cols];
        for i in 0..a.rows() {
            for (w, &x) in weights.iter_mut().zip(a.row(i)) {
                *w = x as f64;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            block.accumulate_weighted(&weights, &mut acc);
            for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
        Ok(out)
    }
}

const HEADER_BYTES: usize = 16;

impl QuantizedBlock {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn bitwidth(&self) -> Bitwidth {
        self.bitwidth
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn packed(&self) -> &[u32] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f32] {
        &self.zero_points
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn num_groups(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    /// Group index owning element `(r, c)`.
    #[inline]
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.group_size
    }

    pub fn code(&self, r: usize, c: usize) -> u8 {
        let bits = self.bitwidth.bits() as usize;
        let i = r * self.cols + c;
        let per_word = 32 / bits;
        ((self.packed[i / per_word] >> ((i % per_word) * bits)) & self.bitwidth.max_code()) as u8
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.bitwidth, self.rows * self.cols)
    }

    pub fn dequantize_row_into(&self, r: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.cols);
        let bits = self.bitwidth.bits() as usize;
        let shift = (32 / bits).trailing_zeros();
        let lane = (32 / bits) - 1;
        let mask = self.bitwidth.max_code();
        let mut lut = [0.0f32; 16];
        let g0 = r * self.groups_per_row();
        let mut i = r * self.cols;
        for (gi, chunk) in out.chunks_mut(self.group_size).enumerate() {
            let (scale, zero) = (
                self.scales[g0 + gi] as f64,
                self.zero_points[g0 + gi] as f64,
            );
            for (k, v) in lut.iter_mut().enumerate().take(mask as usize + 1) {
                *v = (scale * k as f64 + zero) as f32;
            }
            for slot in chunk {
                let word = self.packed[i >> shift];
                *slot = lut[((word >> ((i & lane) * bits)) & mask) as usize];
                i += 1;
            }
        }
    }

    /// `out[j] = x · row_j` for every row, dequantizing on the fly.
    pub fn row_dots(&self, x: &[f32], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        let mut buf = vec![0.0f32; self.cols];
        for (j, o) in out.iter_mut().enumerate() {
            self.dequantize_row_into(j, &mut buf);
            *o = crate::tensor::dot(x, &buf);
        }
    }

    /// `out += Σ_j weights[j] * row_j`, dequantizing on the fly.
    pub fn accumulate_weighted(&self, weights: &[f64], out: &mut [f64]) {
        debug_assert_eq!(weights.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        let mut buf = vec![0.0f32; self.cols];
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.dequantize_row_into(j, &mut buf);
            for (o, &x) in out.iter_mut().zip(&buf) {
                *o += w * x as f64;
            }
        }
    }

    /// Bytes held by packed codes.
    pub fn packed_bytes(&self) -> usize {
        self.packed.len() * 4
    }

    /// Bytes held by scales and zero-points.
    pub fn group_metadata_bytes(&self) -> usize {
        (self.scales.len() + self.zero_points.len()) * 4
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + self.group_metadata_bytes() + self.packed_bytes()
    }

    /// Header (rows, cols, bitwidth, group_size as LE `u32`), scales and
    /// zero-points as LE `f32`, then the packed words as LE `u32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in [
            self.rows as u32,
            self.cols as u32,
            self.bitwidth.bits(),
            self.group_size as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in self.scales.iter().chain(&self.zero_points) {
            w.write_all(&s.to_le_bytes())?;
        }
        for word in &self.packed {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let bitwidth =
            Bitwidth::from_bits(read_u32(r)?).map_err(|e| Error::Format(e.to_string()))?;
        let group_size = read_u32(r)? as usize;
        if rows == 0 || cols == 0 || group_size == 0 {
            return Err(Error::Format(format!(
                "degenerate block header {rows}x{cols}, group_size {group_size}"
            )));
        }
        let groups = rows * cols.div_ceil(group_size);
        let scales = (0..groups)
            .map(|_| read_f32(r))
            .collect::<Result<Vec<_>>>()?;
        let zero_points = (0..groups)
            .map(|_| read_f32(r))
            .collect::<Result<Vec<_>>>()?;
        let packed = (0..packed_len(rows * cols, bitwidth))
            .map(|_| read_u32(r))
            .collect::<Result<Vec<_>>>()?;

        let block = QuantizedBlock {
            rows,
            cols,
            bitwidth,
            group_size,
            packed,
            scales,
            zero_points,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let block = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(block)
    }

    fn validate(&self) -> Result<()> {
        let used_bits = self.rows * self.cols * self.bitwidth.bits() as usize;
        if used_bits % 32 != 0 {
            let last = *self.packed.last().expect("non-empty block");
            if last >> (used_bits % 32) != 0 {
                return Err(Error::Format("unused trailing bits are set".into()));
            }
        }
        for (g, (&s, &z)) in self.scales.iter().zip(&self.zero_points).enumerate() {
            if !(s.is_finite() && z.is_finite()) || s < 0.0 {
                return Err(Error::Format(format!(
                    "group {g} has invalid scale {s} / zero {z}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    read_u32(r).map(f32::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-3.0f32..3.0))
    }

    /// Round-trip bound with a few ulps of slack for the f32 dequant arithmetic.
    fn within_bound(x: f32, y: f32, scale: f32, zero: f32) -> bool {
        let slack = 4.0 * f32::EPSILON * (x.abs().max(zero.abs()) + scale * 16.0);
        (x - y).abs() <= scale / 2.0 + slack
    }

    /// `|x - (scale * code + zero)|` evaluated exactly from the stored parameters.
    fn exact_error(q: &QuantizedBlock, x: f32, r: usize, c: usize) -> f64 {
        let g = q.group_of(r, c);
        let offset = x as f64 - q.zero_points()[g] as f64;
        (offset - q.scales()[g] as f64 * q.code(r, c) as f64).abs()
    }

    #[test]
    fn half_up_rounding_on_midpoint() {
        let m = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        let q = quantize(&m, Bitwidth::Int4, 3).unwrap();
        assert!(q.scales()[0] as f64 <= 1.0 / 15.0);
        assert!((q.scales()[0] - 1.0 / 15.0).abs() <= f32::EPSILON / 15.0);
        assert_eq!(q.zero_points(), &[0.0]);
        assert_eq!(q.codes(), vec![0, 15, 8]);
        let d = dequantize(&q);
        assert!((d.get(0, 2) - 8.0 / 15.0).abs() < 1e-7);
        assert!(within_bound(0.5, d.get(0, 2), q.scales()[0], 0.0));
        assert!(exact_error(&q, 0.5, 0, 2) <= 1.0 / 30.0);
    }

    #[test]
    fn stored_scale_never_exceeds_exact() {
        for x in [1.0f64 / 3.0, 0.1, 7.0 / 15.0, 1e-30, 0.0, 0.25] {
            let s = scale_below(x);
            assert!(s as f64 <= x);
            assert!(x - s as f64 <= f32::EPSILON as f64 * x);
        }
    }

    #[test]
    fn constant_group_is_exact() {
        let m = Matrix::from_vec(1, 3, vec![3.7; 3]).unwrap();
        let q = quantize(&m, Bitwidth::Int2, 32).unwrap();
        assert_eq!(q.scales(), &[0.0]);
        assert_eq!(q.zero_points(), &[3.7]);
        assert_eq!(q.codes(), vec![0, 0, 0]);
        assert_eq!(dequantize(&q), m);
    }

    #[test]
    fn grid_values_round_trip_exactly() {
        // Dyadic grids {m + k * scale}: every point and the scale are exact in f32.
        for (bw, scale) in [(Bitwidth::Int2, 0.25f32), (Bitwidth::Int4, 0.125)] {
            let n = bw.max_code() as usize + 1;
            let vals: Vec<f32> = (0..n).rev().map(|k| -1.0 + scale * k as f32).collect();
            let m = Matrix::from_vec(1, n, vals).unwrap();
            let q = quantize(&m, bw, n).unwrap();
            assert_eq!(q.scales(), &[scale]);
            let expected: Vec<u8> = (0..n as u8).rev().collect();
            assert_eq!(q.codes(), expected);
            assert_eq!(dequantize(&q), m);
        }
    }

    #[test]
    fn zero_codes_dequantize_to_zero_point() {
        let m = Matrix::from_vec(2, 2, vec![-0.5; 4]).unwrap();
        let q = quantize(&m, Bitwidth::Int4, 1).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q).as_slice(), &[-0.5; 4]);
    }

    #[test]
    fn random_8x16_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 8, 16);
        let q = quantize(&m, Bitwidth::Int4, 8).unwrap();
        let d = dequantize(&q);
        let max_scale = q.scales().iter().fold(0.0f32, |a, &b| a.max(b));
        assert!(d.max_abs_diff(&m) <= max_scale / 2.0 + 1e-6);
        for r in 0..8 {
            for c in 0..16 {
                let g = q.group_of(r, c);
                assert!(within_bound(
                    m.get(r, c),
                    d.get(r, c),
                    q.scales()[g],
                    q.zero_points()[g]
                ));
            }
        }
    }

    #[test]
    fn ragged_last_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 3, 10);
        let q = quantize(&m, Bitwidth::Int2, 4).unwrap();
        assert_eq!(q.groups_per_row(), 3);
        assert_eq!(q.num_groups(), 9);
        assert_eq!(q.packed().len(), packed_len(30, Bitwidth::Int2));
        assert_eq!(q.packed().len(), 2);
        // 30 codes * 2 bits = 60 bits; the top 4 bits of word 1 stay clear.
        assert_eq!(q.packed()[1] >> 28, 0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = Matrix::zeros(2, 2);
        m.set(1, 0, f32::NAN);
        assert!(matches!(
            quantize(&m, Bitwidth::Int4, 2),
            Err(Error::NonFinite { index: 2 })
        ));
        m.set(1, 0, f32::INFINITY);
        assert!(quantize(&m, Bitwidth::Int4, 2).is_err());
        assert!(quantize(&Matrix::zeros(2, 2), Bitwidth::Int4, 0).is_err());
        assert!(quantize(&Matrix::zeros(0, 2), Bitwidth::Int4, 1).is_err());
        assert!(Bitwidth::from_bits(8).is_err());
    }

    #[test]
    fn fqm_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 4, 4);
        let q = quantize(&m, Bitwidth::Int4, 2).unwrap();
        let d = dequantize(&q);
        assert_eq!(fqm(&Matrix::identity(4), &q, false).unwrap(), d);
        assert_eq!(fqm(&Matrix::identity(4), &q, true).unwrap(), d.transpose());
        let z = fqm(&Matrix::zeros(3, 4), &q, false).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(fqm(&Matrix::zeros(3, 5), &q, false).is_err());
        assert!(fqm(&Matrix::zeros(3, 5), &q, true).is_err());
    }

    #[test]
    fn fqm_row_vector_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_matrix(&mut rng, 1, 4);
        let q = quantize(&random_matrix(&mut rng, 4, 4), Bitwidth::Int2, 4).unwrap();
        let d = dequantize(&q);
        // Independent naive product in f64.
        let mut expected = Matrix::zeros(1, 4);
        for j in 0..4 {
            let mut s = 0.0f64;
            for k in 0..4 {
                s += a.get(0, k) as f64 * d.get(k, j) as f64;
            }
            expected.set(0, j, s as f32);
        }
        assert!(fqm(&a, &q, false).unwrap().relative_error(&expected) <= 1e-6);
    }

    #[test]
    fn serialization_layout() {
        let m = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        let q = quantize(&m, Bitwidth::Int4, 3).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 + 4);
        assert_eq!(
            &bytes[0..16],
            &[1, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0, 3, 0, 0, 0]
        );
        // codes 0, 15, 8 -> 0x8F0
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0x8F0);
        assert_eq!(QuantizedBlock::from_bytes(&bytes).unwrap(), q);
    }

    #[test]
    fn deserialization_rejects_garbage() {
        let m = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        let mut bytes = quantize(&m, Bitwidth::Int4, 3).unwrap().to_bytes();
        assert!(QuantizedBlock::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(QuantizedBlock::from_bytes(&extra).is_err());
        // Set a bit past the 12 used bits.
        let n = bytes.len();
        bytes[n - 1] = 0x80;
        assert!(matches!(
            QuantizedBlock::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(codes in prop::collection::vec(0u8..16, 1..1000), four in any::<bool>()) {
            let bw = if four { Bitwidth::Int4 } else { Bitwidth::Int2 };
            let codes: Vec<u8> = codes.into_iter().map(|c| c & bw.max_code() as u8).collect();
            let words = pack_codes(&codes, bw);
            prop_assert_eq!(words.len(), packed_len(codes.len(), bw));
            prop_assert_eq!(unpack_codes(&words, bw, codes.len()), codes);
        }

        #[test]
        fn round_trip_bound_holds(
            vals in prop::collection::vec(-100.0f32..100.0, 1..64),
            gs in 1usize..40,
            four in any::<bool>(),
        ) {
            let bw = if four { Bitwidth::Int4 } else { Bitwidth::Int2 };
            let m = Matrix::from_vec(1, vals.len(), vals).unwrap();
            let q = quantize(&m, bw, gs).unwrap();
            let d = dequantize(&q);
            for c in 0..m.cols() {
                let g = q.group_of(0, c);
                let group = &m.row(0)[g * gs..((g + 1) * gs).min(m.cols())];
                let lo = group.iter().copied().fold(f32::INFINITY, f32::min) as f64;
                let hi = group.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                prop_assert!(exact_error(&q, m.get(0, c), 0, c) <= (hi - lo) / (2.0 * bw.max_code() as f64));
                prop_assert!(q.code(0, c) as u32 <= bw.max_code());
                prop_assert!(q.scales()[g] >= 0.0);
                prop_assert!(within_bound(m.get(0, c), d.get(0, c), q.scales()[g], q.zero_points()[g]));
            }
        }

        #[test]
        fn fqm_matches_dequantized_product(
            seed in any::<u64>(),
            m in 1usize..8,
            k in 1usize..96,
            n in 1usize..16,
            gs in 1usize..40,
            four in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bw = if four { Bitwidth::Int4 } else { Bitwidth::Int2 };
            let a = random_matrix(&mut rng, m, k);
            let block = quantize(&random_matrix(&mut rng, k, n), bw, gs).unwrap();
            let oracle = a.matmul(&dequantize(&block)).unwrap();
            prop_assert!(fqm(&a, &block, false).unwrap().relative_error(&oracle) <= 1e-6);

            let block_t = quantize(&random_matrix(&mut rng, n, k), bw, gs).unwrap();
            let oracle_t = a.matmul(&dequantize(&block_t).transpose()).unwrap();
            prop_assert!(fqm(&a, &block_t, true).unwrap().relative_error(&oracle_t) <= 1e-6);
        }

        #[test]
        fn quantize_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 5, 33);
            let a = quantize(&m, Bitwidth::Int2, 8).unwrap();
            let b = quantize(&m, Bitwidth::Int2, 8).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn fqm_large_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random_matrix(&mut rng, 64, 512);
        let block = quantize(&random_matrix(&mut rng, 512, 64), Bitwidth::Int4, 32).unwrap();
        let oracle = a.matmul(&dequantize(&block)).unwrap();
        assert!(fqm(&a, &block, false).unwrap().relative_error(&oracle) <= 1e-6);
    }
}
