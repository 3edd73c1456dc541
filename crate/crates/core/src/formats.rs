//! Scalar number formats: bit-level decode/encode for MiniFloat-style and
//! denormalised (no implicit bit) floats of up to 32 bits, plus exhaustive
//! enumeration used as a test oracle for the narrow ones.
//!
//! Every value handled here is exactly representable in `f64`; decode never
//! rounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widest format `enumerate_values` will expand.
pub const MAX_ENUMERATION_WIDTH: u32 = 16;

/// Scalar float format descriptor.
///
/// `implicit_leading_bit = true` gives MiniFloat semantics (IEEE-style normal
/// and subnormal ranges), `false` gives DMF semantics where the mantissa is a
/// plain fraction at every exponent. A saturating spec uses its top exponent
/// for finite values and has no infinity or NaN encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FloatSpecDoc", into = "FloatSpecDoc")]
pub struct FloatSpec {
    exponent_bits: u32,
    mantissa_bits: u32,
    bias: i32,
    implicit_leading_bit: bool,
    saturating: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloatSpecDoc {
    e: u32,
    m: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<i32>,
    implicit_bit: bool,
    saturating: bool,
}

impl TryFrom<FloatSpecDoc> for FloatSpec {
    type Error = Error;

    fn try_from(doc: FloatSpecDoc) -> Result<Self> {
        let bias = doc.bias.unwrap_or_else(|| default_bias(doc.e));
        FloatSpec::new(doc.e, doc.m, bias, doc.implicit_bit, doc.saturating)
    }
}

impl From<FloatSpec> for FloatSpecDoc {
    fn from(s: FloatSpec) -> Self {
        FloatSpecDoc {
            e: s.exponent_bits,
            m: s.mantissa_bits,
            bias: (s.bias != default_bias(s.exponent_bits)).then_some(s.bias),
            implicit_bit: s.implicit_leading_bit,
            saturating: s.saturating,
        }
    }
}

/// IEEE-style bias `2^(E-1) - 1`; zero for an exponent-less format.
pub fn default_bias(exponent_bits: u32) -> i32 {
    if exponent_bits == 0 {
        0
    } else {
        (1i32 << (exponent_bits - 1)) - 1
    }
}

impl FloatSpec {
    pub fn new(
        exponent_bits: u32,
        mantissa_bits: u32,
        bias: i32,
        implicit_leading_bit: bool,
        saturating: bool,
    ) -> Result<Self> {
        if 1 + exponent_bits + mantissa_bits > 32 {
            return Err(Error::Unsupported(format!(
                "format width 1+{exponent_bits}+{mantissa_bits} exceeds 32 bits"
            )));
        }
        let spec = FloatSpec {
            exponent_bits,
            mantissa_bits,
            bias,
            implicit_leading_bit,
            saturating,
        };
        // Every encodable value must be an exact binary64 number.
        let top = spec.max_exponent_field() as i64 - bias as i64;
        let bottom = spec.min_scale_exponent();
        if top > 1023 || bottom < -1074 {
            return Err(Error::Unsupported(format!(
                "exponent range of E={exponent_bits}, M={mantissa_bits}, bias={bias} does not fit binary64"
            )));
        }
        Ok(spec)
    }

    /// Saturating MiniFloat with the default bias.
    pub fn minifloat(exponent_bits: u32, mantissa_bits: u32) -> Result<Self> {
        Self::new(
            exponent_bits,
            mantissa_bits,
            default_bias(exponent_bits),
            true,
            true,
        )
    }

    /// Saturating denormalised MiniFloat with the default bias.
    pub fn dmf(exponent_bits: u32, mantissa_bits: u32) -> Result<Self> {
        Self::new(
            exponent_bits,
            mantissa_bits,
            default_bias(exponent_bits),
            false,
            true,
        )
    }

    /// Same format with a different exponent bias.
    pub fn with_bias(self, bias: i32) -> Result<Self> {
        Self::new(
            self.exponent_bits,
            self.mantissa_bits,
            bias,
            self.implicit_leading_bit,
            self.saturating,
        )
    }

    pub fn exponent_bits(&self) -> u32 {
        self.exponent_bits
    }

    pub fn mantissa_bits(&self) -> u32 {
        self.mantissa_bits
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    pub fn implicit_leading_bit(&self) -> bool {
        self.implicit_leading_bit
    }

    pub fn saturating(&self) -> bool {
        self.saturating
    }

    /// Total bits including the sign.
    pub fn width(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    fn exponent_field_max(&self) -> u32 {
        ((1u64 << self.exponent_bits) - 1) as u32
    }

    /// Largest exponent field that encodes finite values.
    fn max_exponent_field(&self) -> u32 {
        let all_ones = self.exponent_field_max();
        if self.saturating || all_ones == 0 {
            all_ones
        } else {
            all_ones - 1
        }
    }

    fn mantissa_field_max(&self) -> u32 {
        ((1u64 << self.mantissa_bits) - 1) as u32
    }

    /// Power of two of one mantissa ulp at the smallest exponent.
    fn min_scale_exponent(&self) -> i64 {
        let e0 = if self.implicit_leading_bit { 1 } else { 0 };
        e0 - self.bias as i64 - self.mantissa_bits as i64
    }

    /// Whether a pattern encodes a finite value. Only non-saturating specs
    /// reserve the all-ones exponent for infinities and NaNs.
    pub fn is_finite_pattern(&self, p: BitPattern) -> bool {
        p.exponent <= self.max_exponent_field()
    }
}

/// The three fields of an encoded number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitPattern {
    pub sign: bool,
    pub exponent: u32,
    pub mantissa: u32,
}

impl BitPattern {
    pub fn new(sign: bool, exponent: u32, mantissa: u32, spec: &FloatSpec) -> Result<Self> {
        let p = BitPattern {
            sign,
            exponent,
            mantissa,
        };
        p.check(spec)?;
        Ok(p)
    }

    pub const ZERO: BitPattern = BitPattern {
        sign: false,
        exponent: 0,
        mantissa: 0,
    };

    pub fn check(&self, spec: &FloatSpec) -> Result<()> {
        if self.exponent > spec.exponent_field_max() || self.mantissa > spec.mantissa_field_max() {
            return Err(Error::InvalidInput(format!(
                "pattern {self:?} does not fit E={}, M={}",
                spec.exponent_bits, spec.mantissa_bits
            )));
        }
        Ok(())
    }

    /// Packs as `sign | exponent | mantissa`, most significant first.
    pub fn to_bits(&self, spec: &FloatSpec) -> u32 {
        let m = spec.mantissa_bits;
        let e = spec.exponent_bits;
        ((self.sign as u64) << (e + m) | (self.exponent as u64) << m | self.mantissa as u64) as u32
    }

    pub fn from_bits(bits: u32, spec: &FloatSpec) -> Result<Self> {
        let m = spec.mantissa_bits;
        let e = spec.exponent_bits;
        let bits = bits as u64;
        if bits >> spec.width() != 0 {
            return Err(Error::InvalidInput(format!(
                "bits {bits:#x} exceed {}-bit width",
                spec.width()
            )));
        }
        Ok(BitPattern {
            sign: (bits >> (e + m)) & 1 == 1,
            exponent: ((bits >> m) & spec.exponent_field_max() as u64) as u32,
            mantissa: (bits & spec.mantissa_field_max() as u64) as u32,
        })
    }

    pub fn negate(self) -> Self {
        BitPattern {
            sign: !self.sign,
            ..self
        }
    }
}

/// Exact `2^k` for `k` in the binary64 range, subnormals included.
pub(crate) fn pow2(k: i64) -> f64 {
    if k > 1023 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k >= -1074 {
        f64::from_bits(1u64 << (k + 1074))
    } else {
        0.0
    }
}

/// `floor(log2(x))` for finite `x > 0`, computed from the bit pattern.
pub(crate) fn floor_log2(x: f64) -> i64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i64;
    if biased == 0 {
        let frac = bits & ((1u64 << 52) - 1);
        (63 - frac.leading_zeros() as i64) - 1074
    } else {
        biased - 1023
    }
}

/// Tie-breaking rule for `encode_nearest`. Both rules pick the nearest
/// representable value; they differ only on exact midpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Midpoints go to the even mantissa integer.
    #[default]
    NearestTiesToEven,
    /// Midpoints go to the larger magnitude.
    NearestTiesAway,
}

fn round_int(q: f64, rounding: Rounding) -> f64 {
    match rounding {
        Rounding::NearestTiesToEven => q.round_ties_even(),
        Rounding::NearestTiesAway => q.round(),
    }
}

/// Exact value of a pattern. Non-saturating specs decode their reserved
/// exponent to `±inf` (zero mantissa) or NaN.
pub fn decode(p: BitPattern, spec: &FloatSpec) -> f64 {
    let sign = if p.sign { -1.0 } else { 1.0 };
    if !spec.is_finite_pattern(p) {
        return if p.mantissa == 0 && spec.implicit_leading_bit {
            sign * f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let m_bits = spec.mantissa_bits as i64;
    let bias = spec.bias as i64;
    let (significand, exp) = if !spec.implicit_leading_bit {
        (p.mantissa as u64, p.exponent as i64 - bias - m_bits)
    } else if p.exponent == 0 {
        (p.mantissa as u64, 1 - bias - m_bits)
    } else {
        (
            (1u64 << m_bits) | p.mantissa as u64,
            p.exponent as i64 - bias - m_bits,
        )
    };
    sign * (significand as f64 * pow2(exp))
}

/// Largest finite value of the spec.
pub fn max_finite(spec: &FloatSpec) -> f64 {
    let e = spec.max_exponent_field();
    let m = spec.mantissa_field_max();
    if spec.implicit_leading_bit && e == 0 {
        // Only the subnormal branch exists.
        decode(
            BitPattern {
                sign: false,
                exponent: 0,
                mantissa: m,
            },
            spec,
        )
    } else {
        decode(
            BitPattern {
                sign: false,
                exponent: e,
                mantissa: m,
            },
            spec,
        )
    }
}

fn max_pattern(spec: &FloatSpec, sign: bool) -> BitPattern {
    BitPattern {
        sign,
        exponent: spec.max_exponent_field(),
        mantissa: spec.mantissa_field_max(),
    }
}

/// Nearest representable pattern to `x`. Magnitudes beyond the largest finite
/// value saturate; values that round to zero give the canonical `+0` pattern.
pub fn encode_nearest(x: f64, spec: &FloatSpec, rounding: Rounding) -> Result<BitPattern> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cannot encode non-finite value {x}"
        )));
    }
    let sign = x.is_sign_negative();
    let a = x.abs();
    if a == 0.0 {
        return Ok(BitPattern::ZERO);
    }
    let mut p = if spec.implicit_leading_bit {
        encode_implicit(a, spec, rounding)
    } else {
        encode_denormalised(a, spec, rounding)
    };
    if p.exponent == 0 && p.mantissa == 0 {
        return Ok(BitPattern::ZERO);
    }
    p.sign = sign;
    Ok(p)
}

fn encode_implicit(a: f64, spec: &FloatSpec, rounding: Rounding) -> BitPattern {
    let m_bits = spec.mantissa_bits as i64;
    let bias = spec.bias as i64;
    let e_max = spec.max_exponent_field() as i64;
    let hidden = 1u64 << m_bits;

    let biased = floor_log2(a) + bias;
    if biased > e_max && e_max >= 1 {
        return max_pattern(spec, false);
    }
    if biased < 1 || e_max == 0 {
        // Subnormal grid: multiples of 2^(1-b-M).
        let q = round_int(a / pow2(1 - bias - m_bits), rounding);
        if e_max == 0 {
            let m = q.min(spec.mantissa_field_max() as f64) as u32;
            return BitPattern {
                sign: false,
                exponent: 0,
                mantissa: m,
            };
        }
        let q = q as u64;
        return if q >= hidden {
            BitPattern {
                sign: false,
                exponent: 1,
                mantissa: 0,
            }
        } else {
            BitPattern {
                sign: false,
                exponent: 0,
                mantissa: q as u32,
            }
        };
    }
    let q = round_int(a / pow2(biased - bias - m_bits), rounding) as u64;
    let (e, m) = if q >= hidden << 1 {
        (biased + 1, 0)
    } else {
        (biased, q - hidden)
    };
    if e > e_max {
        return max_pattern(spec, false);
    }
    BitPattern {
        sign: false,
        exponent: e as u32,
        mantissa: m as u32,
    }
}

fn encode_denormalised(a: f64, spec: &FloatSpec, rounding: Rounding) -> BitPattern {
    // The value set is a union of overlapping uniform grids, one per exponent.
    // Take the per-exponent nearest candidate and keep the best overall.
    let m_bits = spec.mantissa_bits as i64;
    let bias = spec.bias as i64;
    let m_max = spec.mantissa_field_max() as f64;
    let mut best: Option<(f64, BitPattern, f64)> = None;
    for e in 0..=spec.max_exponent_field() {
        let step = pow2(e as i64 - bias - m_bits);
        let q = round_int(a / step, rounding).min(m_max);
        let v = q * step;
        let dist = (a - v).abs();
        let cand = BitPattern {
            sign: false,
            exponent: e,
            mantissa: q as u32,
        };
        let better = match &best {
            None => true,
            Some((bd, bp, bv)) => {
                if dist != *bd {
                    dist < *bd
                } else if v == *bv {
                    false
                } else {
                    match rounding {
                        Rounding::NearestTiesAway => v > *bv,
                        Rounding::NearestTiesToEven => {
                            cand.mantissa.is_multiple_of(2) && bp.mantissa % 2 == 1
                        }
                    }
                }
            }
        };
        if better {
            best = Some((dist, cand, v));
        }
        if q < m_max {
            // Coarser grids cannot beat an unsaturated finer candidate except on
            // a tie at the saturation boundary, which the next exponent covers.
            if let Some((bd, _, _)) = best {
                if bd < step / 2.0 {
                    break;
                }
            }
        }
    }
    best.map(|(_, p, _)| p).unwrap_or(BitPattern::ZERO)
}

/// One enumerated encoding and its value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub pattern: BitPattern,
    pub value: f64,
    /// True when an earlier entry in the sorted list has the same value.
    pub duplicate: bool,
}

/// Every finite encoding of a spec of at most 16 bits, sorted by value
/// ascending (ties by packed bits), with repeated values flagged.
pub fn enumerate_values(spec: &FloatSpec) -> Result<Vec<GridPoint>> {
    if spec.width() > MAX_ENUMERATION_WIDTH {
        return Err(Error::Unsupported(format!(
            "enumeration limited to {MAX_ENUMERATION_WIDTH}-bit formats, got {}",
            spec.width()
        )));
    }
    let mut points: Vec<(f64, u32, BitPattern)> = (0..1u32 << spec.width())
        .filter_map(|bits| {
            let p = BitPattern::from_bits(bits, spec).ok()?;
            spec.is_finite_pattern(p)
                .then(|| (decode(p, spec), bits, p))
        })
        .collect();
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(points.len());
    for (i, &(value, _, pattern)) in points.iter().enumerate() {
        let duplicate = i > 0 && points[i - 1].0 == value;
        out.push(GridPoint {
            pattern,
            value,
            duplicate,
        });
    }
    Ok(out)
}
