//! Bit-exact packed layout.
//!
//! Each block is written as one `b`-bit two's-complement exponent followed by
//! `n` `p`-bit two's-complement mantissas. Bits fill each byte starting from
//! the least significant bit. Every block starts on a byte boundary and the
//! unused high bits of its last byte are zero, so one block occupies
//! `ceil((n·p + b) / 8)` bytes and blocks are concatenated in tensor order.

use super::{BfpBlock, BfpFormat, BfpTensor};
use crate::error::{Error, Result};

/// Raw bytes of a packed [`BfpTensor`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBuffer {
    bytes: Vec<u8>,
}

impl PackedBuffer {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    filled: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        Self {
            out,
            acc: 0,
            filled: 0,
        }
    }

    /// Appends the low `bits` bits of `value` (bits <= 16).
    fn put(&mut self, value: i32, bits: u32) {
        let mask = (1u64 << bits) - 1;
        self.acc |= (value as u64 & mask) << self.filled;
        self.filled += bits;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    /// Flushes a partial byte, zero-filling its high bits.
    fn align(&mut self) {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
            self.acc = 0;
            self.filled = 0;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            acc: 0,
            filled: 0,
        }
    }

    /// Reads `bits` bits as a sign-extended two's-complement integer.
    fn get_signed(&mut self, bits: u32) -> i32 {
        while self.filled < bits {
            self.acc |= u64::from(self.bytes[self.pos]) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let raw = (self.acc & ((1u64 << bits) - 1)) as i64;
        self.acc >>= bits;
        self.filled -= bits;
        let shift = 64 - bits;
        ((raw << shift) >> shift) as i32
    }

    /// Leftover bits of the current byte; must be zero in a canonical buffer.
    fn take_remainder(&mut self) -> u64 {
        let rest = self.acc;
        self.acc = 0;
        self.filled = 0;
        rest
    }
}

/// Serializes every block in order.
pub fn pack(t: &BfpTensor) -> PackedBuffer {
    let fmt = t.format();
    let mut bytes = Vec::with_capacity(t.block_count() * fmt.block_bytes());
    let mut w = BitWriter::new(&mut bytes);
    for block in t.blocks() {
        w.put(block.exponent, u32::from(fmt.exponent_bits()));
        for &m in &block.mantissas {
            w.put(m, u32::from(fmt.mantissa_bits()));
        }
        w.align();
    }
    PackedBuffer { bytes }
}

/// Rebuilds a tensor of `shape` blocked along `axis` from packed bytes.
///
/// Rejects truncated buffers, oversized buffers, the excluded mantissa
/// `-2^(p-1)`, non-zero trailing bits and non-zero padding elements.
pub fn unpack(bytes: &[u8], fmt: &BfpFormat, shape: &[usize], axis: usize) -> Result<BfpTensor> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "blocking axis {axis} invalid for shape {shape:?}"
        )));
    }
    let rows: usize = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .product();
    let block_count = rows * shape[axis].div_ceil(fmt.block_size());
    let expected = block_count * fmt.block_bytes();
    if bytes.len() < expected {
        return Err(Error::CorruptBuffer(format!(
            "truncated: {} bytes, layout needs {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes for a layout of {expected}",
            bytes.len()
        )));
    }
    let p = u32::from(fmt.mantissa_bits());
    let excluded = -(1i32 << (p - 1));
    let mut blocks = Vec::with_capacity(block_count);
    for (i, chunk) in bytes.chunks_exact(fmt.block_bytes()).enumerate() {
        let mut r = BitReader::new(chunk);
        let exponent = r.get_signed(u32::from(fmt.exponent_bits()));
        let mut mantissas = Vec::with_capacity(fmt.block_size());
        for _ in 0..fmt.block_size() {
            let m = r.get_signed(p);
            if m == excluded {
                return Err(Error::CorruptBuffer(format!(
                    "block {i} holds the excluded mantissa {m}"
                )));
            }
            mantissas.push(m);
        }
        if r.take_remainder() != 0 {
            return Err(Error::CorruptBuffer(format!(
                "block {i} has non-zero trailing bits"
            )));
        }
        blocks.push(BfpBlock {
            exponent,
            mantissas,
        });
    }
    BfpTensor::from_parts(*fmt, shape.to_vec(), axis, blocks).map_err(|e| match e {
        Error::InvalidFormat(msg) => Error::CorruptBuffer(msg),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfp::quantize_tensor;
    use crate::tensor::Tensor;

    #[test]
    fn bfp12_32_block_is_17_bytes() {
        let f = BfpFormat::BFP12_32;
        assert_eq!(f.block_bits(), 8 + 32 * 4);
        assert_eq!(f.block_bytes(), 17);
        let x = Tensor::from_vec((0..32).map(|i| f64::from(i) - 16.0).collect());
        let t = quantize_tensor(&x, &f, 0).unwrap();
        assert_eq!(pack(&t).len(), 17);
    }

    #[test]
    fn empty_tensor_packs_to_nothing() {
        let t = quantize_tensor(&Tensor::zeros(vec![0]), &BfpFormat::BFP12_32, 0).unwrap();
        let buf = pack(&t);
        assert!(buf.is_empty());
        assert_eq!(
            unpack(buf.as_bytes(), &BfpFormat::BFP12_32, &[0], 0).unwrap(),
            t
        );
    }

    #[test]
    fn known_bit_layout() {
        // p = 4, n = 2, e = 0, M = [7, -1]: exponent byte 0x00, then nibbles 0x7 and 0xF
        let f = BfpFormat::new(4, 8, 2).unwrap();
        let t = quantize_tensor(&Tensor::from_vec(vec![7.0, -1.0]), &f, 0).unwrap();
        assert_eq!(t.blocks()[0].exponent, 0);
        assert_eq!(pack(&t).as_bytes(), &[0x00, 0xF7]);

        // p = 3, n = 3, b = 8: 17 bits -> 3 bytes, e = -1 (0xFF), M = [3, -3, 1]
        let f = BfpFormat::new(3, 8, 3).unwrap();
        let t = quantize_tensor(&Tensor::from_vec(vec![1.5, -1.5, 0.5]), &f, 0).unwrap();
        assert_eq!(t.blocks()[0].exponent, -1);
        assert_eq!(t.blocks()[0].mantissas, vec![3, -3, 1]);
        // mantissas fill from bit 0 of the second byte: 011, 101, then 001 spills over
        let bytes = pack(&t).into_bytes();
        assert_eq!(bytes, vec![0xFF, 0b0110_1011, 0b0000_0000]);
        assert_eq!(unpack(&bytes, &f, &[3], 0).unwrap(), t);
    }

    #[test]
    fn truncated_and_oversized_buffers() {
        let f = BfpFormat::BFP12_32;
        let x = Tensor::from_vec(vec![1.0; 40]);
        let t = quantize_tensor(&x, &f, 0).unwrap();
        let bytes = pack(&t).into_bytes();
        assert_eq!(bytes.len(), 34);
        assert!(matches!(
            unpack(&bytes[..33], &f, &[40], 0),
            Err(Error::CorruptBuffer(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            unpack(&long, &f, &[40], 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            unpack(&bytes, &f, &[40], 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_canonical_bytes_are_rejected() {
        let f = BfpFormat::new(4, 8, 2).unwrap();
        // mantissa nibble 0x8 is -8, outside the symmetric range
        assert!(matches!(
            unpack(&[0x00, 0x81], &f, &[2], 0),
            Err(Error::CorruptBuffer(_))
        ));
        // padding element non-zero: shape [1] uses only the first mantissa
        assert!(matches!(
            unpack(&[0x00, 0x11], &f, &[1], 0),
            Err(Error::CorruptBuffer(_))
        ));
        // trailing bits of a 17-bit block
        let f = BfpFormat::new(3, 8, 3).unwrap();
        assert!(matches!(
            unpack(&[0x00, 0x00, 0x02], &f, &[3], 0),
            Err(Error::CorruptBuffer(_))
        ));
    }
}
