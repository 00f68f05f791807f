//! Block Floating Point codec.
//!
//! A block stores `n` signed integer mantissas `M_i` and one signed `b`-bit
//! exponent `e`; element `i` decodes to `2^e · M_i`. Mantissas use the
//! symmetric range `[-(2^(p-1) - 1), 2^(p-1) - 1]`.
//!
//! Casting picks the smallest exponent for which the rounded largest-magnitude
//! element still fits, then rounds every element half-to-even. All-zero
//! blocks carry the most negative exponent.
//!
//! Tensors are blocked along one axis: every contiguous run of `n` elements
//! along that axis is an independent block, and the last block of each run is
//! zero-padded.

mod pack;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use pack::{pack, unpack, PackedBuffer};

/// Shared exponent width used by every named preset.
pub const DEFAULT_EXPONENT_BITS: u8 = 8;

/// Largest accepted block size; keeps `n·p + b` and integer dot accumulators well inside 64 bits.
pub const MAX_BLOCK_SIZE: usize = 1 << 20;

/// Mantissa precision `p`, exponent width `b` and block size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFormat", into = "RawFormat")]
pub struct BfpFormat {
    mantissa_bits: u8,
    exponent_bits: u8,
    block_size: usize,
}

#[derive(Serialize, Deserialize)]
struct RawFormat {
    mantissa_bits: u8,
    exponent_bits: u8,
    block_size: usize,
}

impl TryFrom<RawFormat> for BfpFormat {
    type Error = Error;

    fn try_from(raw: RawFormat) -> Result<Self> {
        BfpFormat::new(raw.mantissa_bits, raw.exponent_bits, raw.block_size)
    }
}

impl From<BfpFormat> for RawFormat {
    fn from(f: BfpFormat) -> Self {
        RawFormat {
            mantissa_bits: f.mantissa_bits,
            exponent_bits: f.exponent_bits,
            block_size: f.block_size,
        }
    }
}

impl BfpFormat {
    pub const BFP12_32: BfpFormat = BfpFormat::preset(4, 32);
    pub const BFP12_64: BfpFormat = BfpFormat::preset(4, 64);
    pub const BFP12_128: BfpFormat = BfpFormat::preset(4, 128);
    pub const BFP16_32: BfpFormat = BfpFormat::preset(8, 32);
    pub const BFP16_64: BfpFormat = BfpFormat::preset(8, 64);
    pub const BFP16_128: BfpFormat = BfpFormat::preset(8, 128);

    const fn preset(mantissa_bits: u8, block_size: usize) -> Self {
        Self {
            mantissa_bits,
            exponent_bits: DEFAULT_EXPONENT_BITS,
            block_size,
        }
    }

    /// Validates `2 <= p <= 16`, `8 <= b <= 16` and `1 <= n <= MAX_BLOCK_SIZE`.
    pub fn new(mantissa_bits: u8, exponent_bits: u8, block_size: usize) -> Result<Self> {
        if !(2..=16).contains(&mantissa_bits) {
            return Err(Error::InvalidFormat(format!(
                "mantissa bits must be in 2..=16, got {mantissa_bits}"
            )));
        }
        if !(8..=16).contains(&exponent_bits) {
            return Err(Error::InvalidFormat(format!(
                "exponent bits must be in 8..=16, got {exponent_bits}"
            )));
        }
        if block_size == 0 || block_size > MAX_BLOCK_SIZE {
            return Err(Error::InvalidFormat(format!(
                "block size must be in 1..={MAX_BLOCK_SIZE}, got {block_size}"
            )));
        }
        Ok(Self {
            mantissa_bits,
            exponent_bits,
            block_size,
        })
    }

    /// 4-bit mantissas, 8-bit exponent.
    pub fn bfp12(block_size: usize) -> Result<Self> {
        Self::new(4, DEFAULT_EXPONENT_BITS, block_size)
    }

    /// 8-bit mantissas, 8-bit exponent.
    pub fn bfp16(block_size: usize) -> Result<Self> {
        Self::new(8, DEFAULT_EXPONENT_BITS, block_size)
    }

    pub fn mantissa_bits(&self) -> u8 {
        self.mantissa_bits
    }

    pub fn exponent_bits(&self) -> u8 {
        self.exponent_bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// `2^(p-1) - 1`.
    pub fn max_mantissa(&self) -> i32 {
        (1 << (self.mantissa_bits - 1)) - 1
    }

    /// `-2^(b-1)`, also the exponent of an all-zero block.
    pub fn min_exponent(&self) -> i32 {
        -(1 << (self.exponent_bits - 1))
    }

    pub fn max_exponent(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    /// Storage bits of one block: `n·p + b`.
    pub fn block_bits(&self) -> u64 {
        self.block_size as u64 * u64::from(self.mantissa_bits) + u64::from(self.exponent_bits)
    }

    /// Bytes of one packed block, rounded up to a byte boundary.
    pub fn block_bytes(&self) -> usize {
        self.block_bits().div_ceil(8) as usize
    }

    /// `p + b/n`.
    pub fn bits_per_element(&self) -> f64 {
        f64::from(self.mantissa_bits) + f64::from(self.exponent_bits) / self.block_size as f64
    }
}

impl fmt::Display for BfpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exponent_bits == DEFAULT_EXPONENT_BITS {
            write!(
                f,
                "BFP{}_{}",
                self.mantissa_bits + self.exponent_bits,
                self.block_size
            )
        } else {
            write!(
                f,
                "BFP(p={},b={},n={})",
                self.mantissa_bits, self.exponent_bits, self.block_size
            )
        }
    }
}

impl FromStr for BfpFormat {
    type Err = Error;

    /// Parses `BFP<p+8>_<n>`, e.g. `BFP12_32` or `BFP16_128`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("cannot parse format name {s:?}"));
        let rest = s
            .strip_prefix("BFP")
            .or_else(|| s.strip_prefix("bfp"))
            .ok_or_else(bad)?;
        let (total, block) = rest.split_once('_').ok_or_else(bad)?;
        let total: u8 = total.parse().map_err(|_| bad())?;
        let block: usize = block.parse().map_err(|_| bad())?;
        let mantissa = total.checked_sub(DEFAULT_EXPONENT_BITS).ok_or_else(bad)?;
        Self::new(mantissa, DEFAULT_EXPONENT_BITS, block)
    }
}

/// One shared exponent and `n` mantissas.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BfpBlock {
    pub exponent: i32,
    pub mantissas: Vec<i32>,
}

impl BfpBlock {
    pub fn decode(&self, index: usize) -> f64 {
        libm::scalbn(f64::from(self.mantissas[index]), self.exponent)
    }

    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.mantissas.len()).map(|i| self.decode(i)).collect()
    }

    fn check(&self, fmt: &BfpFormat) -> Result<()> {
        if self.mantissas.len() != fmt.block_size {
            return Err(Error::ShapeMismatch(format!(
                "block holds {} mantissas, format {fmt} needs {}",
                self.mantissas.len(),
                fmt.block_size
            )));
        }
        if !(fmt.min_exponent()..=fmt.max_exponent()).contains(&self.exponent) {
            return Err(Error::InvalidFormat(format!(
                "exponent {} outside the {}-bit range",
                self.exponent, fmt.exponent_bits
            )));
        }
        let limit = fmt.max_mantissa();
        if let Some(m) = self.mantissas.iter().find(|m| m.abs() > limit) {
            return Err(Error::InvalidFormat(format!(
                "mantissa {m} outside ±{limit}"
            )));
        }
        Ok(())
    }
}

/// Rounded magnitude of `max_abs` at exponent `e` fits the mantissa range.
fn fits(max_abs: f64, exponent: i32, limit: f64) -> bool {
    libm::scalbn(max_abs, -exponent).round_ties_even() <= limit
}

fn select_exponent(max_abs: f64, fmt: &BfpFormat) -> Result<i32> {
    let limit = f64::from(fmt.max_mantissa());
    let (lo, hi) = (fmt.min_exponent(), fmt.max_exponent());
    if fits(max_abs, lo, limit) {
        return Ok(lo);
    }
    // max_abs ∈ [2^k, 2^(k+1)); at e = k - p + 1 the scaled max is ≥ 2^(p-1), so
    // the answer is k - p + 2, or one more if rounding reaches 2^(p-1).
    let k = libm::ilogb(max_abs);
    let mut e = (k - i32::from(fmt.mantissa_bits) + 2).max(lo);
    while !fits(max_abs, e, limit) {
        e += 1;
    }
    if e > hi {
        return Err(Error::ExponentOverflow {
            max_abs,
            exponent: e,
            limit: hi,
        });
    }
    Ok(e)
}

/// Casts up to `n` values into one block; short input is zero-padded.
pub fn quantize_block(values: &[f64], fmt: &BfpFormat) -> Result<BfpBlock> {
    if values.len() > fmt.block_size {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not fit a block of {}",
            values.len(),
            fmt.block_size
        )));
    }
    let mut max_abs = 0.0f64;
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::InvalidValue { index, value });
        }
        max_abs = max_abs.max(value.abs());
    }
    let mut mantissas = vec![0i32; fmt.block_size];
    if max_abs == 0.0 {
        return Ok(BfpBlock {
            exponent: fmt.min_exponent(),
            mantissas,
        });
    }
    let exponent = select_exponent(max_abs, fmt)?;
    let limit = f64::from(fmt.max_mantissa());
    for (m, &v) in mantissas.iter_mut().zip(values) {
        *m = libm::scalbn(v, -exponent)
            .round_ties_even()
            .clamp(-limit, limit) as i32;
    }
    Ok(BfpBlock {
        exponent,
        mantissas,
    })
}

/// A tensor blocked along one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BfpTensor {
    format: BfpFormat,
    shape: Vec<usize>,
    axis: usize,
    blocks: Vec<BfpBlock>,
}

/// Row geometry of a shape blocked along `axis`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    outer: usize,
    len: usize,
    inner: usize,
    blocks_per_row: usize,
}

impl Layout {
    fn new(shape: &[usize], axis: usize, block_size: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "blocking axis {axis} invalid for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len,
            inner: shape[axis + 1..].iter().product(),
            blocks_per_row: len.div_ceil(block_size),
        })
    }

    fn rows(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat offset of element `l` of row `r`.
    fn offset(&self, row: usize, l: usize) -> usize {
        let (o, i) = (row / self.inner, row % self.inner);
        (o * self.len + l) * self.inner + i
    }
}

impl BfpTensor {
    /// Assembles a tensor from blocks, checking count, ranges and zero padding.
    pub fn from_parts(
        format: BfpFormat,
        shape: Vec<usize>,
        axis: usize,
        blocks: Vec<BfpBlock>,
    ) -> Result<Self> {
        let layout = Layout::new(&shape, axis, format.block_size)?;
        let expected = layout.rows() * layout.blocks_per_row;
        if blocks.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} blocked by {} along axis {axis} needs {expected} blocks, got {}",
                format.block_size,
                blocks.len()
            )));
        }
        let used = layout.len - (layout.blocks_per_row.saturating_sub(1)) * format.block_size;
        for (i, block) in blocks.iter().enumerate() {
            block.check(&format)?;
            if (i + 1) % layout.blocks_per_row == 0
                && block.mantissas[used..].iter().any(|&m| m != 0)
            {
                return Err(Error::InvalidFormat(format!(
                    "padding of block {i} is not zero"
                )));
            }
        }
        Ok(Self {
            format,
            shape,
            axis,
            blocks,
        })
    }

    pub fn format(&self) -> &BfpFormat {
        &self.format
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn blocks(&self) -> &[BfpBlock] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Logical element count (padding excluded).
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks_per_row(&self) -> usize {
        self.shape[self.axis].div_ceil(self.format.block_size)
    }

    /// Zero-filled tail elements in the last block of each blocked row.
    pub fn padding_count(&self) -> usize {
        self.blocks_per_row() * self.format.block_size - self.shape[self.axis]
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.shape, self.axis, self.format.block_size)
            .expect("validated at construction")
    }
}

/// Quantizes each run of `n` elements along `axis` independently.
pub fn quantize_tensor(x: &Tensor, fmt: &BfpFormat, axis: usize) -> Result<BfpTensor> {
    let layout = Layout::new(x.shape(), axis, fmt.block_size)?;
    let data = x.data();
    let mut blocks = Vec::with_capacity(layout.rows() * layout.blocks_per_row);
    let mut row_values = vec![0.0; layout.len];
    for row in 0..layout.rows() {
        for (l, v) in row_values.iter_mut().enumerate() {
            *v = data[layout.offset(row, l)];
        }
        for (block, chunk) in row_values.chunks(fmt.block_size).enumerate() {
            let b = quantize_block(chunk, fmt).map_err(|e| Error::AtBlock {
                row,
                block,
                source: Box::new(e),
            })?;
            blocks.push(b);
        }
    }
    Ok(BfpTensor {
        format: *fmt,
        shape: x.shape().to_vec(),
        axis,
        blocks,
    })
}

/// Decodes every element as `2^e · M`, dropping padding.
pub fn dequantize(t: &BfpTensor) -> Tensor {
    let layout = t.layout();
    let n = t.format.block_size;
    let mut data = vec![0.0; t.len()];
    if layout.blocks_per_row > 0 {
        for (row, row_blocks) in t.blocks.chunks(layout.blocks_per_row).enumerate() {
            for l in 0..layout.len {
                data[layout.offset(row, l)] = row_blocks[l / n].decode(l % n);
            }
        }
    }
    Tensor::new(t.shape.clone(), data).expect("shape matches element count")
}

/// Dot product over all elements using integer mantissa products per block
/// and exponent addition.
///
/// The operands must share shape, blocking axis and block size; mantissa
/// widths may differ (BFP16 queries against BFP12 keys).
pub fn bfp_dot(a: &BfpTensor, k: &BfpTensor) -> Result<f64> {
    if a.shape != k.shape || a.axis != k.axis || a.format.block_size != k.format.block_size {
        return Err(Error::ShapeMismatch(format!(
            "dot of {:?}/axis {}/n={} with {:?}/axis {}/n={}",
            a.shape, a.axis, a.format.block_size, k.shape, k.axis, k.format.block_size
        )));
    }
    let mut total = 0.0;
    for (ba, bk) in a.blocks.iter().zip(&k.blocks) {
        let acc: i64 = ba
            .mantissas
            .iter()
            .zip(&bk.mantissas)
            .map(|(&x, &y)| i64::from(x) * i64::from(y))
            .sum();
        if acc != 0 {
            total += libm::scalbn(acc as f64, ba.exponent + bk.exponent);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(p: u8, n: usize) -> BfpFormat {
        BfpFormat::new(p, 8, n).unwrap()
    }

    /// Tries every exponent in the b-bit range, smallest first.
    fn oracle_block(values: &[f64], f: &BfpFormat) -> BfpBlock {
        let limit = f64::from(f.max_mantissa());
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut mantissas = vec![0; f.block_size()];
        if max_abs == 0.0 {
            return BfpBlock {
                exponent: f.min_exponent(),
                mantissas,
            };
        }
        let exponent = (f.min_exponent()..=f.max_exponent())
            .find(|&e| (max_abs / 2f64.powi(e)).round_ties_even() <= limit)
            .unwrap();
        for (m, v) in mantissas.iter_mut().zip(values) {
            *m = (v / 2f64.powi(exponent))
                .round_ties_even()
                .clamp(-limit, limit) as i32;
        }
        BfpBlock {
            exponent,
            mantissas,
        }
    }

    #[test]
    fn all_zero_block_uses_min_exponent() {
        let b = quantize_block(&[0.0; 4], &fmt(4, 4)).unwrap();
        assert_eq!(b.exponent, -128);
        assert_eq!(b.mantissas, vec![0; 4]);
    }

    #[test]
    fn small_integers_are_exact() {
        let b = quantize_block(&[1.0, 2.0, 3.0, 7.0], &fmt(4, 4)).unwrap();
        assert_eq!(b.exponent, 0);
        assert_eq!(b.mantissas, vec![1, 2, 3, 7]);
        assert_eq!(b.dequantize(), vec![1.0, 2.0, 3.0, 7.0]);
    }

    #[test]
    fn mixed_block_matches_exhaustive_search() {
        let values = [1.0, -0.5, 0.25, 6.0];
        let f = fmt(4, 4);
        let got = quantize_block(&values, &f).unwrap();
        let want = oracle_block(&values, &f);
        assert_eq!(got, want);
        // frozen from the oracle: 6.0 fits 7 at e = 0, 0.25 rounds to 0
        assert_eq!(want.exponent, 0);
        assert_eq!(want.mantissas, vec![1, 0, 0, 6]);
    }

    #[test]
    fn rounding_up_to_the_range_edge_bumps_the_exponent() {
        // 7.5 rounds to 8 > 7 at e = 0, so e = 1 and 7.5/2 = 3.75 -> 4
        let b = quantize_block(&[7.5, 1.0], &fmt(4, 2)).unwrap();
        assert_eq!(b.exponent, 1);
        assert_eq!(b.mantissas, vec![4, 0]);
    }

    #[test]
    fn ties_round_to_even() {
        let b = quantize_block(&[6.0, 2.5, 3.5, -0.5], &fmt(4, 4)).unwrap();
        assert_eq!(b.exponent, 0);
        assert_eq!(b.mantissas, vec![6, 2, 4, 0]);
    }

    #[test]
    fn short_input_is_zero_padded() {
        // minimal exponent: 3 = 6 · 2^-1
        let b = quantize_block(&[3.0], &fmt(4, 4)).unwrap();
        assert_eq!(b.exponent, -1);
        assert_eq!(b.mantissas, vec![6, 0, 0, 0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = quantize_block(&[1.0, f64::NAN], &fmt(4, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidValue { index: 1, .. }));
        let err = quantize_block(&[f64::INFINITY], &fmt(4, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidValue { index: 0, .. }));
    }

    #[test]
    fn huge_values_overflow_the_exponent() {
        let err = quantize_block(&[1e300], &fmt(4, 4)).unwrap_err();
        assert!(matches!(err, Error::ExponentOverflow { limit: 127, .. }));
    }

    #[test]
    fn tiny_values_clamp_to_min_exponent() {
        let b = quantize_block(&[1e-60, 3e-39], &fmt(4, 2)).unwrap();
        assert_eq!(b.exponent, -128);
        // 3e-39 · 2^128 ≈ 1.02
        assert_eq!(b.mantissas, vec![0, 1]);
    }

    #[test]
    fn too_many_values_for_one_block() {
        assert!(matches!(
            quantize_block(&[1.0; 5], &fmt(4, 4)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn format_bounds() {
        assert!(BfpFormat::new(1, 8, 32).is_err());
        assert!(BfpFormat::new(17, 8, 32).is_err());
        assert!(BfpFormat::new(4, 7, 32).is_err());
        assert!(BfpFormat::new(4, 8, 0).is_err());
        let f = BfpFormat::BFP12_32;
        assert_eq!(f.max_mantissa(), 7);
        assert_eq!((f.min_exponent(), f.max_exponent()), (-128, 127));
    }

    #[test]
    fn preset_names_parse_and_print() {
        for (name, f) in [
            ("BFP12_32", BfpFormat::BFP12_32),
            ("BFP12_64", BfpFormat::BFP12_64),
            ("BFP12_128", BfpFormat::BFP12_128),
            ("BFP16_32", BfpFormat::BFP16_32),
            ("BFP16_64", BfpFormat::BFP16_64),
            ("BFP16_128", BfpFormat::BFP16_128),
        ] {
            assert_eq!(name.parse::<BfpFormat>().unwrap(), f);
            assert_eq!(f.to_string(), name);
        }
        assert!("BFP7_32".parse::<BfpFormat>().is_err());
        assert!("FP16".parse::<BfpFormat>().is_err());
        assert!("BFP12_0".parse::<BfpFormat>().is_err());
    }

    #[test]
    fn bits_per_element_presets() {
        assert_eq!(BfpFormat::BFP12_32.bits_per_element(), 4.25);
        assert_eq!(BfpFormat::BFP16_32.bits_per_element(), 8.25);
        let ratio = BfpFormat::BFP16_32.bits_per_element() / BfpFormat::BFP12_32.bits_per_element();
        assert!((ratio - 1.941).abs() < 1e-3);
    }

    #[test]
    fn tensor_blocks_per_row() {
        let x = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let t = quantize_tensor(&x, &fmt(8, 4), 1).unwrap();
        assert_eq!(t.block_count(), 2);
        assert_eq!(t.padding_count(), 0);
        assert_eq!(dequantize(&t), x);
    }

    #[test]
    fn partial_last_block_is_padded() {
        let x = Tensor::new(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = quantize_tensor(&x, &fmt(8, 4), 1).unwrap();
        assert_eq!(t.block_count(), 2);
        assert_eq!(t.padding_count(), 2);
        assert_eq!(t.blocks()[1].mantissas[2..], [0, 0]);
        assert_eq!(dequantize(&t), x);
    }

    #[test]
    fn blocking_along_a_leading_axis() {
        // blocks run down columns of a 4x2 matrix
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let t = quantize_tensor(&x, &fmt(8, 4), 0).unwrap();
        assert_eq!(t.block_count(), 2);
        assert_eq!(t.blocks()[0].dequantize(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.blocks()[1].dequantize(), vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(dequantize(&t), x);
    }

    #[test]
    fn invalid_axis_and_block_errors_carry_coordinates() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, f64::NAN]).unwrap();
        assert!(matches!(
            quantize_tensor(&x, &fmt(4, 2), 2),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            quantize_tensor(&Tensor::scalar(1.0), &fmt(4, 2), 0),
            Err(Error::ShapeMismatch(_))
        ));
        let err = quantize_tensor(&x, &fmt(4, 2), 1).unwrap_err();
        assert!(matches!(
            err,
            Error::AtBlock {
                row: 1,
                block: 0,
                ..
            }
        ));
    }

    #[test]
    fn empty_tensor_has_no_blocks() {
        let x = Tensor::zeros(vec![0, 8]);
        let t = quantize_tensor(&x, &fmt(4, 4), 1).unwrap();
        assert_eq!(t.block_count(), 0);
        assert_eq!(dequantize(&t), x);
        let x = Tensor::zeros(vec![3, 0]);
        let t = quantize_tensor(&x, &fmt(4, 4), 1).unwrap();
        assert_eq!(t.block_count(), 0);
        assert_eq!(dequantize(&t).shape(), &[3, 0]);
    }

    #[test]
    fn from_parts_rejects_dirty_padding() {
        let f = fmt(4, 4);
        let block = BfpBlock {
            exponent: 0,
            mantissas: vec![1, 2, 3, 1],
        };
        assert!(BfpTensor::from_parts(f, vec![3], 0, vec![block.clone()]).is_err());
        assert!(BfpTensor::from_parts(f, vec![4], 0, vec![block]).is_ok());
    }

    #[test]
    fn dot_with_zero_is_zero() {
        let a = quantize_tensor(&Tensor::from_vec(vec![1.5, -2.0, 3.25]), &fmt(8, 2), 0).unwrap();
        let z = quantize_tensor(&Tensor::from_vec(vec![0.0; 3]), &fmt(4, 2), 0).unwrap();
        assert_eq!(bfp_dot(&a, &z).unwrap(), 0.0);
    }

    #[test]
    fn dot_of_small_integers_is_exact() {
        let q = [3.0, -5.0, 7.0, 100.0, -1.0, 0.0, 12.0, 2.0];
        let k = [1.0, 2.0, -3.0, 4.0, 5.0, -6.0, 7.0, 8.0];
        let f = BfpFormat::bfp16(4).unwrap();
        let a = quantize_tensor(&Tensor::from_vec(q.to_vec()), &f, 0).unwrap();
        let b = quantize_tensor(&Tensor::from_vec(k.to_vec()), &f, 0).unwrap();
        let exact: f64 = q.iter().zip(&k).map(|(x, y)| x * y).sum();
        assert_eq!(bfp_dot(&a, &b).unwrap(), exact);
    }

    #[test]
    fn dot_rejects_mismatched_blocking() {
        let x = Tensor::from_vec(vec![1.0; 8]);
        let a = quantize_tensor(&x, &fmt(8, 4), 0).unwrap();
        let b = quantize_tensor(&x, &fmt(4, 2), 0).unwrap();
        assert!(matches!(bfp_dot(&a, &b), Err(Error::ShapeMismatch(_))));
        let c = quantize_tensor(&Tensor::from_vec(vec![1.0; 7]), &fmt(8, 4), 0).unwrap();
        assert!(matches!(bfp_dot(&a, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn format_serde_validates() {
        let json = serde_json::to_string(&BfpFormat::BFP12_64).unwrap();
        assert_eq!(
            serde_json::from_str::<BfpFormat>(&json).unwrap(),
            BfpFormat::BFP12_64
        );
        let bad = r#"{"mantissa_bits":1,"exponent_bits":8,"block_size":4}"#;
        assert!(serde_json::from_str::<BfpFormat>(bad).is_err());
    }
}
