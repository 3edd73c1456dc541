//! Binary container for [`QTensor`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "BQT1"
//! rows       u32
//! cols       u32
//! kind       u8       0 identity, 1 fixed point, 2 float, 3 BFP, 4 BM, 5 BL
//! params     3 x u8   fixed: [width,0,0]; float: [E,M,flags]; BFP: [M,E,0];
//!                     BM: [E,M,B]; BL: [E,B,0]. Float flags: bit 0 implicit
//!                     leading bit, bit 1 saturating.
//! bias       i32      float exponent bias (0 for other kinds)
//! block      2 x u32  block rows, block cols
//! scale      f64      fixed-point scale (1.0 for other kinds)
//! shared     one field per block, packed LSB-first, padded to a byte
//! payload    one code per element (row-major), packed LSB-first, padded
//! ```

use crate::error::{Error, Result};
use crate::formats::FloatSpec;
use crate::quantizer::{block_count, BlockFormat, QTensor};

pub const QTENSOR_MAGIC: &[u8; 4] = b"BQT1";

const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 3 + 4 + 8 + 8;

struct BitWriter {
    bytes: Vec<u8>,
    acc: u128,
    filled: u32,
}

impl BitWriter {
    fn new(bytes: Vec<u8>) -> Self {
        BitWriter {
            bytes,
            acc: 0,
            filled: 0,
        }
    }

    fn put(&mut self, value: u64, bits: u32) {
        self.acc |= (value as u128) << self.filled;
        self.filled += bits;
        while self.filled >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    /// Pads the current partial byte with zeros.
    fn align(&mut self) {
        if self.filled > 0 {
            self.bytes.push(self.acc as u8);
            self.acc = 0;
            self.filled = 0;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u128,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader {
            bytes,
            pos: 0,
            acc: 0,
            filled: 0,
        }
    }

    fn take(&mut self, bits: u32) -> Result<u64> {
        while self.filled < bits {
            let byte = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| Error::Decode("bitstream truncated".into()))?;
            self.acc |= (byte as u128) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let mask = if bits == 64 {
            u64::MAX as u128
        } else {
            (1u128 << bits) - 1
        };
        let v = (self.acc & mask) as u64;
        self.acc >>= bits;
        self.filled -= bits;
        Ok(v)
    }

    /// Drops padding bits, which must be zero.
    fn align(&mut self) -> Result<()> {
        if self.acc != 0 {
            return Err(Error::Decode("non-zero padding bits".into()));
        }
        self.acc = 0;
        self.filled = 0;
        Ok(())
    }
}

fn packed_len(count: usize, bits: u32) -> Option<usize> {
    count.checked_mul(bits as usize).map(|b| b.div_ceil(8))
}

pub fn encode_qtensor(q: &QTensor) -> Vec<u8> {
    let format = q.format();
    let (kind, params, bias): (u8, [u8; 3], i32) = match *format {
        BlockFormat::Identity => (0, [0, 0, 0], 0),
        BlockFormat::FixedPoint { width } => (1, [width as u8, 0, 0], 0),
        BlockFormat::Float { spec } => {
            let flags = spec.implicit_leading_bit() as u8 | (spec.saturating() as u8) << 1;
            (
                2,
                [
                    spec.exponent_bits() as u8,
                    spec.mantissa_bits() as u8,
                    flags,
                ],
                spec.bias(),
            )
        }
        BlockFormat::Bfp {
            mantissa_bits,
            exponent_bits,
            ..
        } => (3, [mantissa_bits as u8, exponent_bits as u8, 0], 0),
        BlockFormat::Bm {
            exponent_bits,
            mantissa_bits,
            bias_bits,
            ..
        } => (
            4,
            [exponent_bits as u8, mantissa_bits as u8, bias_bits as u8],
            0,
        ),
        BlockFormat::Bl {
            exponent_bits,
            bias_bits,
            ..
        } => (5, [exponent_bits as u8, bias_bits as u8, 0], 0),
    };
    let block = format.block();
    let mut out = Vec::with_capacity(HEADER_LEN + q.payload().len() * 2);
    out.extend_from_slice(QTENSOR_MAGIC);
    out.extend_from_slice(&(q.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(q.cols() as u32).to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&params);
    out.extend_from_slice(&bias.to_le_bytes());
    out.extend_from_slice(&(block[0] as u32).to_le_bytes());
    out.extend_from_slice(&(block[1] as u32).to_le_bytes());
    out.extend_from_slice(&q.scale().to_le_bytes());

    let mut w = BitWriter::new(out);
    let sb = format.shared_bits();
    for &s in q.shared() {
        w.put(s as u64, sb);
    }
    w.align();
    let pb = format.payload_bits();
    for &p in q.payload() {
        w.put(p, pb);
    }
    w.align();
    w.bytes
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_qtensor(bytes: &[u8]) -> Result<QTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != QTENSOR_MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let rows = read_u32(bytes, 4) as usize;
    let cols = read_u32(bytes, 8) as usize;
    let kind = bytes[12];
    let [p0, p1, p2] = [bytes[13] as u32, bytes[14] as u32, bytes[15] as u32];
    let bias = i32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let block = [read_u32(bytes, 20) as usize, read_u32(bytes, 24) as usize];
    let scale = f64::from_le_bytes(bytes[28..36].try_into().unwrap());

    let format = match kind {
        0 => BlockFormat::Identity,
        1 => BlockFormat::FixedPoint { width: p0 },
        2 => {
            if p2 > 3 {
                return Err(Error::Decode(format!("unknown float flags {p2:#x}")));
            }
            let spec = FloatSpec::new(p0, p1, bias, p2 & 1 == 1, p2 & 2 == 2)
                .map_err(|e| Error::Decode(e.to_string()))?;
            BlockFormat::Float { spec }
        }
        3 => BlockFormat::Bfp {
            mantissa_bits: p0,
            exponent_bits: p1,
            block,
        },
        4 => BlockFormat::Bm {
            exponent_bits: p0,
            mantissa_bits: p1,
            bias_bits: p2,
            block,
        },
        5 => BlockFormat::Bl {
            exponent_bits: p0,
            bias_bits: p1,
            block,
        },
        other => return Err(Error::Decode(format!("unknown format kind {other}"))),
    };
    format
        .validate()
        .map_err(|e| Error::Decode(e.to_string()))?;
    if format.block() != block {
        return Err(Error::Decode(format!(
            "elementwise format with block {block:?}"
        )));
    }
    if kind != 2 && bias != 0 {
        return Err(Error::Decode(
            "bias field set for a non-float format".into(),
        ));
    }
    if kind != 1 && scale != 1.0 {
        return Err(Error::Decode(
            "scale field set for a non-fixed-point format".into(),
        ));
    }

    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Decode("element count overflows".into()))?;
    let sb = format.shared_bits();
    let n_shared = if sb > 0 {
        block_count([rows, cols], block)
    } else {
        0
    };
    let body = &bytes[HEADER_LEN..];
    let expected = packed_len(n_shared, sb)
        .zip(packed_len(n, format.payload_bits()))
        .and_then(|(a, b)| a.checked_add(b))
        .ok_or_else(|| Error::Decode("body size overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Decode(format!(
            "body is {} bytes, expected {expected}",
            body.len()
        )));
    }

    let mut r = BitReader::new(body);
    let shared = (0..n_shared)
        .map(|_| r.take(sb).map(|v| v as u32))
        .collect::<Result<Vec<_>>>()?;
    r.align()?;
    let pb = format.payload_bits();
    let payload = (0..n).map(|_| r.take(pb)).collect::<Result<Vec<_>>>()?;
    r.align()?;
    QTensor::from_parts(rows, cols, format, scale, shared, payload)
        .map_err(|e| Error::Decode(e.to_string()))
}
