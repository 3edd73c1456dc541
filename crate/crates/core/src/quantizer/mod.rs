//! Casting real tensors into block-quantized representations and back.
//!
//! Block formats share one field per block: BFP shares an exponent, BM and BL
//! share an exponent bias. The shared field is always chosen from the largest
//! magnitude in the block; elements are then rounded to the nearest point of
//! the block's grid.

mod codec;

pub use codec::{decode_qtensor, encode_qtensor, QTENSOR_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{
    self, decode, encode_nearest, floor_log2, pow2, BitPattern, FloatSpec, Rounding,
};
use crate::tensor::Tensor;

/// Block extent as `[rows, cols]`.
pub type BlockShape = [usize; 2];

/// Block shape used for block formats unless configured otherwise.
pub const DEFAULT_BLOCK: BlockShape = [1, 16];

/// Coarse family of a [`BlockFormat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKind {
    Identity,
    FixedPoint,
    MiniFloat,
    Dmf,
    Bfp,
    Bm,
    Bl,
}

/// Quantization descriptor for one tensor.
///
/// JSON form is tagged by `kind`: `{"kind":"bfp","m":5,"e":8,"block":[1,16]}`,
/// `{"kind":"bm","e":4,"m":3,"b":8}`, `{"kind":"bl","e":7,"b":8}`,
/// `{"kind":"fixed_point","width":8}`, `{"kind":"minifloat","e":4,"m":3}`,
/// `{"kind":"dmf","e":4,"m":3}`, `{"kind":"float","spec":{...}}` and
/// `{"kind":"identity"}`. Block shapes default to `[1,16]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatDoc", into = "FormatDoc")]
pub enum BlockFormat {
    /// No quantization; values stay in binary64 (accounted as FP32 storage).
    Identity,
    /// Per-tensor symmetric fixed point: sign plus `width - 1` magnitude bits.
    FixedPoint { width: u32 },
    /// Elementwise MiniFloat (implicit bit) or DMF (no implicit bit).
    Float { spec: FloatSpec },
    /// Shared `exponent_bits`-bit exponent; elements are sign + `mantissa_bits`.
    Bfp {
        mantissa_bits: u32,
        exponent_bits: u32,
        block: BlockShape,
    },
    /// Shared `bias_bits`-bit exponent bias over MiniFloat elements.
    Bm {
        exponent_bits: u32,
        mantissa_bits: u32,
        bias_bits: u32,
        block: BlockShape,
    },
    /// Shared `bias_bits`-bit exponent bias over sign + exponent elements.
    Bl {
        exponent_bits: u32,
        bias_bits: u32,
        block: BlockShape,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum FormatDoc {
    Identity,
    FixedPoint {
        width: u32,
    },
    Minifloat {
        e: u32,
        m: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<i32>,
    },
    Dmf {
        e: u32,
        m: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<i32>,
    },
    Float {
        spec: FloatSpec,
    },
    Bfp {
        m: u32,
        e: u32,
        #[serde(default = "default_block")]
        block: BlockShape,
    },
    Bm {
        e: u32,
        m: u32,
        b: u32,
        #[serde(default = "default_block")]
        block: BlockShape,
    },
    Bl {
        e: u32,
        b: u32,
        #[serde(default = "default_block")]
        block: BlockShape,
    },
}

fn default_block() -> BlockShape {
    DEFAULT_BLOCK
}

impl TryFrom<FormatDoc> for BlockFormat {
    type Error = Error;

    fn try_from(doc: FormatDoc) -> Result<Self> {
        let f = match doc {
            FormatDoc::Identity => BlockFormat::Identity,
            FormatDoc::FixedPoint { width } => BlockFormat::FixedPoint { width },
            FormatDoc::Minifloat { e, m, bias } => BlockFormat::Float {
                spec: FloatSpec::new(e, m, bias.unwrap_or(formats::default_bias(e)), true, true)?,
            },
            FormatDoc::Dmf { e, m, bias } => BlockFormat::Float {
                spec: FloatSpec::new(e, m, bias.unwrap_or(formats::default_bias(e)), false, true)?,
            },
            FormatDoc::Float { spec } => BlockFormat::Float { spec },
            FormatDoc::Bfp { m, e, block } => BlockFormat::Bfp {
                mantissa_bits: m,
                exponent_bits: e,
                block,
            },
            FormatDoc::Bm { e, m, b, block } => BlockFormat::Bm {
                exponent_bits: e,
                mantissa_bits: m,
                bias_bits: b,
                block,
            },
            FormatDoc::Bl { e, b, block } => BlockFormat::Bl {
                exponent_bits: e,
                bias_bits: b,
                block,
            },
        };
        f.validate()?;
        Ok(f)
    }
}

impl From<BlockFormat> for FormatDoc {
    fn from(f: BlockFormat) -> Self {
        match f {
            BlockFormat::Identity => FormatDoc::Identity,
            BlockFormat::FixedPoint { width } => FormatDoc::FixedPoint { width },
            BlockFormat::Float { spec } => FormatDoc::Float { spec },
            BlockFormat::Bfp {
                mantissa_bits,
                exponent_bits,
                block,
            } => FormatDoc::Bfp {
                m: mantissa_bits,
                e: exponent_bits,
                block,
            },
            BlockFormat::Bm {
                exponent_bits,
                mantissa_bits,
                bias_bits,
                block,
            } => FormatDoc::Bm {
                e: exponent_bits,
                m: mantissa_bits,
                b: bias_bits,
                block,
            },
            BlockFormat::Bl {
                exponent_bits,
                bias_bits,
                block,
            } => FormatDoc::Bl {
                e: exponent_bits,
                b: bias_bits,
                block,
            },
        }
    }
}

impl BlockFormat {
    /// BFP with an 8-bit shared exponent and `width - 1` mantissa bits.
    pub fn bfp(width: u32, block: BlockShape) -> Self {
        BlockFormat::Bfp {
            mantissa_bits: width.saturating_sub(1),
            exponent_bits: 8,
            block,
        }
    }

    pub fn minifloat(e: u32, m: u32) -> Result<Self> {
        Ok(BlockFormat::Float {
            spec: FloatSpec::minifloat(e, m)?,
        })
    }

    pub fn dmf(e: u32, m: u32) -> Result<Self> {
        Ok(BlockFormat::Float {
            spec: FloatSpec::dmf(e, m)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad_block = |b: &BlockShape| b[0] == 0 || b[1] == 0;
        match self {
            BlockFormat::Identity | BlockFormat::Float { .. } => Ok(()),
            BlockFormat::FixedPoint { width } => {
                if !(2..=32).contains(width) {
                    return Err(Error::Config(format!(
                        "fixed-point width {width} outside 2..=32"
                    )));
                }
                Ok(())
            }
            BlockFormat::Bfp {
                mantissa_bits,
                exponent_bits,
                block,
            } => {
                if !(1..=30).contains(mantissa_bits) {
                    return Err(Error::Config(format!(
                        "BFP mantissa bits {mantissa_bits} outside 1..=30"
                    )));
                }
                if !(1..=10).contains(exponent_bits) {
                    return Err(Error::Config(format!(
                        "BFP shared exponent bits {exponent_bits} outside 1..=10"
                    )));
                }
                if bad_block(block) {
                    return Err(Error::Config("block shape entries must be >= 1".into()));
                }
                Ok(())
            }
            BlockFormat::Bm {
                exponent_bits,
                mantissa_bits,
                bias_bits,
                block,
            } => {
                check_shared_bias(*exponent_bits, *mantissa_bits, *bias_bits)?;
                if bad_block(block) {
                    return Err(Error::Config("block shape entries must be >= 1".into()));
                }
                Ok(())
            }
            BlockFormat::Bl {
                exponent_bits,
                bias_bits,
                block,
            } => {
                if *exponent_bits == 0 {
                    return Err(Error::Config("BL needs at least one exponent bit".into()));
                }
                check_shared_bias(*exponent_bits, 0, *bias_bits)?;
                if bad_block(block) {
                    return Err(Error::Config("block shape entries must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> FormatKind {
        match self {
            BlockFormat::Identity => FormatKind::Identity,
            BlockFormat::FixedPoint { .. } => FormatKind::FixedPoint,
            BlockFormat::Float { spec } if spec.implicit_leading_bit() => FormatKind::MiniFloat,
            BlockFormat::Float { .. } => FormatKind::Dmf,
            BlockFormat::Bfp { .. } => FormatKind::Bfp,
            BlockFormat::Bm { .. } => FormatKind::Bm,
            BlockFormat::Bl { .. } => FormatKind::Bl,
        }
    }

    /// Block shape; elementwise formats use `[1, 1]`.
    pub fn block(&self) -> BlockShape {
        match self {
            BlockFormat::Bfp { block, .. }
            | BlockFormat::Bm { block, .. }
            | BlockFormat::Bl { block, .. } => *block,
            _ => [1, 1],
        }
    }

    /// Same format with another block shape (no-op for elementwise formats).
    pub fn with_block(self, new: BlockShape) -> Self {
        match self {
            BlockFormat::Bfp {
                mantissa_bits,
                exponent_bits,
                ..
            } => BlockFormat::Bfp {
                mantissa_bits,
                exponent_bits,
                block: new,
            },
            BlockFormat::Bm {
                exponent_bits,
                mantissa_bits,
                bias_bits,
                ..
            } => BlockFormat::Bm {
                exponent_bits,
                mantissa_bits,
                bias_bits,
                block: new,
            },
            BlockFormat::Bl {
                exponent_bits,
                bias_bits,
                ..
            } => BlockFormat::Bl {
                exponent_bits,
                bias_bits,
                block: new,
            },
            other => other,
        }
    }

    /// Same format with the block shape swapped, for operands whose reduction
    /// dimension runs down the rows.
    pub fn transposed(self) -> Self {
        let [r, c] = self.block();
        self.with_block([c, r])
    }

    /// Stored bits per element, shared fields excluded. Identity counts as FP32.
    pub fn element_bits(&self) -> u32 {
        match self {
            BlockFormat::Identity => 32,
            BlockFormat::FixedPoint { width } => *width,
            BlockFormat::Float { spec } => spec.width(),
            BlockFormat::Bfp { mantissa_bits, .. } => 1 + mantissa_bits,
            BlockFormat::Bm {
                exponent_bits,
                mantissa_bits,
                ..
            } => 1 + exponent_bits + mantissa_bits,
            BlockFormat::Bl { exponent_bits, .. } => 1 + exponent_bits,
        }
    }

    /// Bits of the per-block shared field.
    pub fn shared_bits(&self) -> u32 {
        match self {
            BlockFormat::Bfp { exponent_bits, .. } => *exponent_bits,
            BlockFormat::Bm { bias_bits, .. } | BlockFormat::Bl { bias_bits, .. } => *bias_bits,
            _ => 0,
        }
    }

    /// Width of the payload codes as packed by the binary codec.
    pub(crate) fn payload_bits(&self) -> u32 {
        match self {
            BlockFormat::Identity => 64,
            _ => self.element_bits(),
        }
    }
}

fn check_shared_bias(e: u32, m: u32, b: u32) -> Result<()> {
    if !(1..=16).contains(&b) {
        return Err(Error::Config(format!(
            "shared bias bits {b} outside 1..=16"
        )));
    }
    let max_bias = ((1u64 << b) - 1) as i32;
    FloatSpec::new(e, m, 0, true, true)
        .and_then(|s| s.with_bias(max_bias))
        .map(|_| ())
        .map_err(|err| Error::Config(format!("block element E={e}, M={m}, B={b}: {err}")))
}

/// Rectangular region of a tensor covered by one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRegion {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockRegion {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major element indices into a tensor with `cols` columns.
    pub fn indices(&self, tensor_cols: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.rows)
            .flat_map(move |r| (self.col..self.col + self.cols).map(move |c| r * tensor_cols + c))
    }
}

/// Tiles a `shape` with `block` in row-major block order. Blocks on the
/// trailing edge are truncated when a dimension is not a multiple of the
/// block size.
pub fn partition_blocks(shape: [usize; 2], block: BlockShape) -> Vec<BlockRegion> {
    let [rows, cols] = shape;
    let [br, bc] = block;
    assert!(br > 0 && bc > 0, "block dimensions must be positive");
    let mut out = Vec::with_capacity(rows.div_ceil(br) * cols.div_ceil(bc));
    for row in (0..rows).step_by(br) {
        for col in (0..cols).step_by(bc) {
            out.push(BlockRegion {
                row,
                col,
                rows: br.min(rows - row),
                cols: bc.min(cols - col),
            });
        }
    }
    out
}

/// Number of blocks `partition_blocks` produces.
pub fn block_count(shape: [usize; 2], block: BlockShape) -> usize {
    shape[0].div_ceil(block[0]) * shape[1].div_ceil(block[1])
}

/// A quantized tensor: shared fields per block plus one payload code per
/// element (row-major).
///
/// Payload codes pack `sign | exponent | mantissa` most significant first,
/// using the widths of the element format. Fixed point stores sign and
/// magnitude; identity stores raw binary64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    rows: usize,
    cols: usize,
    format: BlockFormat,
    scale: f64,
    shared: Vec<u32>,
    payload: Vec<u64>,
}

impl QTensor {
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        format: BlockFormat,
        scale: f64,
        shared: Vec<u32>,
        payload: Vec<u64>,
    ) -> Result<Self> {
        let q = QTensor {
            rows,
            cols,
            format,
            scale,
            shared,
            payload,
        };
        q.check()?;
        Ok(q)
    }

    fn check(&self) -> Result<()> {
        self.format.validate()?;
        let n = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::InvalidInput("tensor size overflows".into()))?;
        if self.payload.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} payload codes for {n} elements",
                self.payload.len()
            )));
        }
        let expected_shared = if self.format.shared_bits() > 0 {
            block_count([self.rows, self.cols], self.format.block())
        } else {
            0
        };
        if self.shared.len() != expected_shared {
            return Err(Error::InvalidInput(format!(
                "{} shared fields, expected {expected_shared}",
                self.shared.len()
            )));
        }
        let sb = self.format.shared_bits();
        if self.shared.iter().any(|&s| (s as u64) >> sb != 0) {
            return Err(Error::InvalidInput("shared field exceeds its width".into()));
        }
        let pb = self.format.payload_bits();
        if pb < 64 && self.payload.iter().any(|&p| p >> pb != 0) {
            return Err(Error::InvalidInput("payload code exceeds its width".into()));
        }
        match self.format {
            BlockFormat::FixedPoint { .. } => {
                if !(self.scale.is_finite() && self.scale > 0.0) {
                    return Err(Error::InvalidInput(
                        "fixed-point scale must be positive".into(),
                    ));
                }
            }
            BlockFormat::Identity
                if self.payload.iter().any(|&p| !f64::from_bits(p).is_finite()) => {
                    return Err(Error::InvalidInput("non-finite identity payload".into()));
                }
            _ => {}
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn format(&self) -> &BlockFormat {
        &self.format
    }

    /// Per-tensor scale (fixed point only; 1.0 otherwise).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Shared field per block in `partition_blocks` order (empty for
    /// elementwise formats).
    pub fn shared(&self) -> &[u32] {
        &self.shared
    }

    pub fn payload(&self) -> &[u64] {
        &self.payload
    }

    pub fn blocks(&self) -> Vec<BlockRegion> {
        partition_blocks(self.shape(), self.format.block())
    }

    /// Unbiased shared exponent of each BFP block.
    pub fn bfp_exponents(&self) -> Option<Vec<i64>> {
        match self.format {
            BlockFormat::Bfp { exponent_bits, .. } => {
                let bias = formats::default_bias(exponent_bits) as i64;
                Some(self.shared.iter().map(|&f| f as i64 - bias).collect())
            }
            _ => None,
        }
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "tensor contains non-finite value {v}"
        )));
    }
    Ok(())
}

fn block_max(t: &Tensor, region: &BlockRegion) -> f64 {
    region
        .indices(t.cols())
        .fold(0.0f64, |m, i| m.max(t.data()[i].abs()))
}

/// Casts `tensor` to `format`, dispatching on the format kind.
pub fn cast(tensor: &Tensor, format: &BlockFormat) -> Result<QTensor> {
    format.validate()?;
    match *format {
        BlockFormat::Identity => {
            check_finite(tensor)?;
            let payload = tensor.data().iter().map(|v| v.to_bits()).collect();
            QTensor::from_parts(
                tensor.rows(),
                tensor.cols(),
                *format,
                1.0,
                Vec::new(),
                payload,
            )
        }
        BlockFormat::FixedPoint { width } => cast_fixed_point(tensor, width),
        BlockFormat::Float { spec } => cast_elementwise(tensor, &spec),
        BlockFormat::Bfp { .. } => cast_bfp(tensor, format),
        BlockFormat::Bm { .. } => cast_bm(tensor, format),
        BlockFormat::Bl { .. } => cast_bl(tensor, format),
    }
}

/// Block floating point. Each block stores the biased exponent
/// `E_s = floor(log2(max|x|))` (clamped to the field) and each element is
/// `(-1)^s * m / 2^(M-1) * 2^E_s` with `m` rounded to nearest-even and
/// saturated at `2^M - 1`. An all-zero block gets the minimum field.
pub fn cast_bfp(tensor: &Tensor, format: &BlockFormat) -> Result<QTensor> {
    let BlockFormat::Bfp {
        mantissa_bits,
        exponent_bits,
        block,
    } = *format
    else {
        return Err(Error::Config(format!(
            "cast_bfp called with {:?}",
            format.kind()
        )));
    };
    format.validate()?;
    check_finite(tensor)?;
    let bias = formats::default_bias(exponent_bits) as i64;
    let field_max = (1i64 << exponent_bits) - 1;
    let m_max = (1u64 << mantissa_bits) - 1;
    let blocks = partition_blocks(tensor.shape(), block);
    let mut shared = Vec::with_capacity(blocks.len());
    let mut payload = vec![0u64; tensor.len()];
    for region in &blocks {
        let a_max = block_max(tensor, region);
        let field = if a_max == 0.0 {
            0
        } else {
            (floor_log2(a_max) + bias).clamp(0, field_max)
        };
        shared.push(field as u32);
        let step = pow2(field - bias - mantissa_bits as i64 + 1);
        for i in region.indices(tensor.cols()) {
            let x = tensor.data()[i];
            let m = ((x.abs() / step).round_ties_even() as u64).min(m_max);
            let sign = (x.is_sign_negative() && m != 0) as u64;
            payload[i] = sign << mantissa_bits | m;
        }
    }
    QTensor::from_parts(tensor.rows(), tensor.cols(), *format, 1.0, shared, payload)
}

/// Shared bias that puts `max|x|` in the top binade of an `E`-bit exponent,
/// clamped to the `B`-bit field. All-zero blocks take the largest bias.
fn shared_bias(a_max: f64, exponent_bits: u32, bias_bits: u32) -> i64 {
    let bias_max = (1i64 << bias_bits) - 1;
    if a_max == 0.0 {
        return bias_max;
    }
    let top = (1i64 << exponent_bits) - 1;
    (top - floor_log2(a_max)).clamp(0, bias_max)
}

fn cast_shared_bias(
    tensor: &Tensor,
    format: &BlockFormat,
    exponent_bits: u32,
    mantissa_bits: u32,
    bias_bits: u32,
    block: BlockShape,
    rounding: Rounding,
) -> Result<QTensor> {
    format.validate()?;
    check_finite(tensor)?;
    let blocks = partition_blocks(tensor.shape(), block);
    let mut shared = Vec::with_capacity(blocks.len());
    let mut payload = vec![0u64; tensor.len()];
    for region in &blocks {
        let bias = shared_bias(block_max(tensor, region), exponent_bits, bias_bits);
        shared.push(bias as u32);
        let spec = FloatSpec::new(exponent_bits, mantissa_bits, bias as i32, true, true)?;
        for i in region.indices(tensor.cols()) {
            let p = encode_nearest(tensor.data()[i], &spec, rounding)?;
            payload[i] = p.to_bits(&spec) as u64;
        }
    }
    QTensor::from_parts(tensor.rows(), tensor.cols(), *format, 1.0, shared, payload)
}

/// Block MiniFloat: shared bias `clamp((2^E - 1) - floor(log2(max|x|)), 0, 2^B - 1)`,
/// elements rounded to nearest-even under that bias.
pub fn cast_bm(tensor: &Tensor, format: &BlockFormat) -> Result<QTensor> {
    let BlockFormat::Bm {
        exponent_bits,
        mantissa_bits,
        bias_bits,
        block,
    } = *format
    else {
        return Err(Error::Config(format!(
            "cast_bm called with {:?}",
            format.kind()
        )));
    };
    cast_shared_bias(
        tensor,
        format,
        exponent_bits,
        mantissa_bits,
        bias_bits,
        block,
        Rounding::NearestTiesToEven,
    )
}

/// Block logarithm: BM with no mantissa bits, so elements are signed powers
/// of two (or zero). Midpoints round to the larger magnitude.
pub fn cast_bl(tensor: &Tensor, format: &BlockFormat) -> Result<QTensor> {
    let BlockFormat::Bl {
        exponent_bits,
        bias_bits,
        block,
    } = *format
    else {
        return Err(Error::Config(format!(
            "cast_bl called with {:?}",
            format.kind()
        )));
    };
    cast_shared_bias(
        tensor,
        format,
        exponent_bits,
        0,
        bias_bits,
        block,
        Rounding::NearestTiesAway,
    )
}

/// Per-tensor symmetric fixed point with `width` bits (sign + magnitude).
pub fn cast_fixed_point(tensor: &Tensor, width: u32) -> Result<QTensor> {
    let format = BlockFormat::FixedPoint { width };
    format.validate()?;
    check_finite(tensor)?;
    let qmax = ((1u64 << (width - 1)) - 1) as f64;
    let a_max = tensor.max_abs();
    let scale = if a_max == 0.0 {
        1.0
    } else {
        stable_scale(a_max / qmax, qmax)
    };
    let payload = tensor
        .data()
        .iter()
        .map(|&x| {
            let q = (x.abs() / scale).round_ties_even().min(qmax) as u64;
            ((x.is_sign_negative() && q != 0) as u64) << (width - 1) | q
        })
        .collect();
    QTensor::from_parts(
        tensor.rows(),
        tensor.cols(),
        format,
        scale,
        Vec::new(),
        payload,
    )
}

/// Nudges `scale` to a fixed point of `s -> (qmax * s) / qmax` so that
/// re-quantizing a dequantized tensor reproduces the same scale.
fn stable_scale(mut scale: f64, qmax: f64) -> f64 {
    for _ in 0..8 {
        let next = (qmax * scale) / qmax;
        if next == scale {
            break;
        }
        scale = next;
    }
    scale
}

/// Elementwise MiniFloat/DMF cast (block `[1,1]`, no shared fields).
pub fn cast_elementwise(tensor: &Tensor, spec: &FloatSpec) -> Result<QTensor> {
    check_finite(tensor)?;
    let payload = tensor
        .data()
        .iter()
        .map(|&x| Ok(encode_nearest(x, spec, Rounding::NearestTiesToEven)?.to_bits(spec) as u64))
        .collect::<Result<Vec<_>>>()?;
    QTensor::from_parts(
        tensor.rows(),
        tensor.cols(),
        BlockFormat::Float { spec: *spec },
        1.0,
        Vec::new(),
        payload,
    )
}

/// Exact binary64 reconstruction of the represented values.
pub fn dequantize(q: &QTensor) -> Tensor {
    let mut out = vec![0.0; q.payload.len()];
    match q.format {
        BlockFormat::Identity => {
            for (o, &p) in out.iter_mut().zip(&q.payload) {
                *o = f64::from_bits(p);
            }
        }
        BlockFormat::FixedPoint { width } => {
            let mag_mask = (1u64 << (width - 1)) - 1;
            for (o, &p) in out.iter_mut().zip(&q.payload) {
                let v = (p & mag_mask) as f64 * q.scale;
                *o = if p >> (width - 1) & 1 == 1 { -v } else { v };
            }
        }
        BlockFormat::Float { spec } => {
            for (o, &p) in out.iter_mut().zip(&q.payload) {
                *o = decode_code(p, &spec);
            }
        }
        BlockFormat::Bfp {
            mantissa_bits,
            exponent_bits,
            block,
        } => {
            let bias = formats::default_bias(exponent_bits) as i64;
            let mask = (1u64 << mantissa_bits) - 1;
            for (region, &field) in partition_blocks(q.shape(), block).iter().zip(&q.shared) {
                let step = pow2(field as i64 - bias - mantissa_bits as i64 + 1);
                for i in region.indices(q.cols) {
                    let p = q.payload[i];
                    let v = (p & mask) as f64 * step;
                    out[i] = if p >> mantissa_bits & 1 == 1 { -v } else { v };
                }
            }
        }
        BlockFormat::Bm {
            exponent_bits,
            mantissa_bits,
            block,
            ..
        } => dequantize_shared_bias(q, exponent_bits, mantissa_bits, block, &mut out),
        BlockFormat::Bl {
            exponent_bits,
            block,
            ..
        } => dequantize_shared_bias(q, exponent_bits, 0, block, &mut out),
    }
    Tensor::from_vec(q.rows, q.cols, out).expect("shape checked at construction")
}

fn decode_code(code: u64, spec: &FloatSpec) -> f64 {
    let p =
        BitPattern::from_bits(code as u32, spec).expect("payload width checked at construction");
    decode(p, spec)
}

fn dequantize_shared_bias(q: &QTensor, e: u32, m: u32, block: BlockShape, out: &mut [f64]) {
    for (region, &bias) in partition_blocks(q.shape(), block).iter().zip(&q.shared) {
        let spec = FloatSpec::new(e, m, bias as i32, true, true).expect("validated format");
        for i in region.indices(q.cols) {
            out[i] = decode_code(q.payload[i], &spec);
        }
    }
}

/// `dequantize(cast(tensor, format))`; identity returns the input unchanged.
pub fn fake_quantize(tensor: &Tensor, format: &BlockFormat) -> Result<Tensor> {
    if matches!(format, BlockFormat::Identity) {
        return Ok(tensor.clone());
    }
    Ok(dequantize(&cast(tensor, format)?))
}
