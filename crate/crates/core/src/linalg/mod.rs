//! Dense reference math and the block-quantized GEMM.

mod transformer;

pub use transformer::{
    forward_prepared, prepare_layer, transformer_layer_forward, GemmSite, LayerQuant, LayerWeights,
    Operand, PreparedLayer, Probe, QuantConfig, QuantConfigDoc, TensorSite, LN_EPS,
};

use crate::error::{Error, Result};
use crate::formats::pow2;
use crate::quantizer::{dequantize, BlockFormat, QTensor};
use crate::tensor::Tensor;

/// `a * b` in binary64. Each output accumulates its products in ascending
/// reduction index order starting from zero, so results do not depend on
/// how the loops are scheduled.
pub fn gemm_ref(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "gemm inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate().take(k) {
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

struct BfpOperand {
    /// Signed mantissa integers, row-major.
    mantissas: Vec<i64>,
    /// Power of two of one mantissa unit, per block in block order.
    unit_exp: Vec<i64>,
    block: [usize; 2],
    cols: usize,
}

impl BfpOperand {
    fn new(q: &QTensor) -> Option<Self> {
        let BlockFormat::Bfp {
            mantissa_bits,
            block,
            ..
        } = *q.format()
        else {
            return None;
        };
        let mask = (1u64 << mantissa_bits) - 1;
        let mantissas = q
            .payload()
            .iter()
            .map(|&p| {
                let m = (p & mask) as i64;
                if p >> mantissa_bits & 1 == 1 {
                    -m
                } else {
                    m
                }
            })
            .collect();
        let unit_exp = q
            .bfp_exponents()?
            .into_iter()
            .map(|e| e - mantissa_bits as i64 + 1)
            .collect();
        Some(BfpOperand {
            mantissas,
            unit_exp,
            block,
            cols: q.cols(),
        })
    }

    fn block_exp(&self, r: usize, c: usize) -> i64 {
        let blocks_per_row = self.cols.div_ceil(self.block[1]);
        self.unit_exp[(r / self.block[0]) * blocks_per_row + c / self.block[1]]
    }
}

/// Block-quantized GEMM. For two BFP operands whose blocks share boundaries
/// along the reduction dimension, each block pair is reduced as an integer
/// dot product of mantissas and scaled once by the product of the two shared
/// exponents; block partial sums then accumulate in binary64. Any other
/// format pair falls back to dequantize + [`gemm_ref`].
pub fn qgemm(a: &QTensor, b: &QTensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "qgemm inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (Some(qa), Some(qb)) = (BfpOperand::new(a), BfpOperand::new(b)) else {
        return gemm_ref(&dequantize(a), &dequantize(b));
    };
    let kb = qa.block[1];
    if kb != qb.block[0] {
        return Err(Error::BlockAlignment(format!(
            "A blocks span {} reduction elements, B blocks span {}",
            qa.block[1], qb.block[0]
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &qa.mantissas[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for k0 in (0..k).step_by(kb) {
                let k1 = (k0 + kb).min(k);
                let mut dot: i128 = 0;
                for kk in k0..k1 {
                    dot += arow[kk] as i128 * qb.mantissas[kk * n + j] as i128;
                }
                if dot != 0 {
                    let scale = pow2(qa.block_exp(i, k0) + qb.block_exp(k0, j));
                    acc += dot as f64 * scale;
                }
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Row-wise layer normalisation `(x - mean) / sqrt(var + eps) * gain + bias`
/// with population variance.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Shape(format!(
            "layer norm parameters of length {}/{} for {} columns",
            gain.len(),
            bias.len(),
            x.cols()
        )));
    }
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Softmax along each row, max-subtracted.
pub fn softmax_lastaxis(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}
