//! Single-tensor container files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "BFPT"
//! 4       4           format version, u32 LE (currently 1)
//! 8       4           dtype, u32 LE: 0 = f64, 1 = f32, 2 = packed BFP
//! 12      4           ndim, u32 LE
//! 16      4·ndim      dims, u32 LE each
//! dtype 2 only:
//!         1           mantissa bits p
//!         1           exponent bits b
//!         2           reserved, zero
//!         4           block size n, u32 LE
//!         4           blocking axis, u32 LE
//! then    4           CRC-32 of every preceding header byte, u32 LE
//! then                payload: little-endian values, or the packed block buffer
//! ```
//!
//! The payload length must match the header exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bfp::{self, BfpFormat, BfpTensor};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const MAGIC: [u8; 4] = *b"BFPT";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on `ndim`, rejects absurd headers before allocating.
pub const MAX_DIMS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
    PackedBfp = 2,
}

impl Dtype {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::PackedBfp),
            other => Err(Error::CorruptFile(format!("unknown dtype code {other}"))),
        }
    }
}

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F64(Tensor),
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Packed(BfpTensor),
}

impl StoredTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredTensor::F64(_) => Dtype::F64,
            StoredTensor::F32 { .. } => Dtype::F32,
            StoredTensor::Packed(_) => Dtype::PackedBfp,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::F32 { shape, .. } => shape,
            StoredTensor::Packed(t) => t.shape(),
        }
    }

    /// Widens or decodes to an `f64` tensor.
    pub fn to_f64(&self) -> Tensor {
        match self {
            StoredTensor::F64(t) => t.clone(),
            StoredTensor::F32 { shape, data } => {
                Tensor::new(shape.clone(), data.iter().map(|&v| f64::from(v)).collect())
                    .expect("validated shape")
            }
            StoredTensor::Packed(t) => bfp::dequantize(t),
        }
    }
}

/// Parsed header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u32,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    /// Format and blocking axis of a packed payload.
    pub packed: Option<(BfpFormat, usize)>,
    pub header_len: usize,
    pub payload_len: usize,
    pub crc: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))
}

/// Serializes to the container layout.
pub fn encode(t: &StoredTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, t.dtype() as u32);
    let shape = t.shape();
    put_u32(&mut out, dim_u32(shape.len())?);
    for &d in shape {
        put_u32(&mut out, dim_u32(d)?);
    }
    if let StoredTensor::Packed(p) = t {
        let f = p.format();
        out.push(f.mantissa_bits());
        out.push(f.exponent_bits());
        out.extend_from_slice(&[0, 0]);
        put_u32(&mut out, dim_u32(f.block_size())?);
        put_u32(&mut out, dim_u32(p.axis())?);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    match t {
        StoredTensor::F64(x) => x
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::F32 { data, .. } => data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::Packed(p) => out.extend_from_slice(bfp::pack(p).as_bytes()),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses and checks the header; the payload length is derived, not read.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::NotATensorFile);
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(c.u32()?)?;
    let ndim = c.u32()?;
    if ndim > MAX_DIMS {
        return Err(Error::CorruptFile(format!("{ndim} dimensions")));
    }
    let dims = (0..ndim)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let packed = if dtype == Dtype::PackedBfp {
        let p = c.u8()?;
        let b = c.u8()?;
        let reserved = c.take(2)?;
        let n = c.u32()? as usize;
        let axis = c.u32()? as usize;
        if reserved != [0, 0] {
            return Err(Error::CorruptFile(
                "reserved header bytes are not zero".into(),
            ));
        }
        let fmt = BfpFormat::new(p, b, n).map_err(|e| Error::CorruptFile(e.to_string()))?;
        if axis >= dims.len() {
            return Err(Error::CorruptFile(format!(
                "blocking axis {axis} for {} dims",
                dims.len()
            )));
        }
        Some((fmt, axis))
    } else {
        None
    };
    let header_end = c.pos;
    let crc = c.u32()?;
    if crc != crc32fast::hash(&bytes[..header_end]) {
        return Err(Error::CorruptFile("header checksum mismatch".into()));
    }
    let overflow = || Error::CorruptFile("dimensions overflow".into());
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(overflow)?;
    let payload_len = match (dtype, packed) {
        (Dtype::F64, _) => count.checked_mul(8).ok_or_else(overflow)?,
        (Dtype::F32, _) => count.checked_mul(4).ok_or_else(overflow)?,
        (Dtype::PackedBfp, Some((fmt, axis))) => {
            let rows = dims
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != axis)
                .try_fold(1usize, |acc, (_, &d)| acc.checked_mul(d))
                .ok_or_else(overflow)?;
            rows.checked_mul(dims[axis].div_ceil(fmt.block_size()))
                .and_then(|blocks| blocks.checked_mul(fmt.block_bytes()))
                .ok_or_else(overflow)?
        }
        (Dtype::PackedBfp, None) => unreachable!("packed header parsed above"),
    };
    Ok(Header {
        version,
        dtype,
        dims,
        packed,
        header_len: c.pos,
        payload_len,
        crc,
    })
}

/// Parses a whole container.
pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    let h = read_header(bytes)?;
    let payload = &bytes[h.header_len..];
    if payload.len() != h.payload_len {
        return Err(Error::CorruptFile(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            h.payload_len
        )));
    }
    match h.dtype {
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok(StoredTensor::F64(Tensor::new(h.dims, data)?))
        }
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Ok(StoredTensor::F32 {
                shape: h.dims,
                data,
            })
        }
        Dtype::PackedBfp => {
            let (fmt, axis) = h.packed.expect("packed header");
            bfp::unpack(payload, &fmt, &h.dims, axis)
                .map(StoredTensor::Packed)
                .map_err(|e| Error::CorruptFile(e.to_string()))
        }
    }
}

/// Saves through a temporary file in the target directory, then renames.
pub fn save(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode(t)?)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a 2-d tensor of any dtype as a matrix.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    Matrix::from_tensor(&load(path)?.to_f64())
}
