//! A copy-task model whose weights are written down rather than trained.
//!
//! The residual stream holds a one-hot position (height [`POS_GAIN`]) in
//! channels 0..16 and two token slots of eight channels each. A slot stores
//! the four bits of a token as pairs `(+b, -b)` with `b = ±1`, so every row
//! has the same mean and variance and LayerNorm acts as a fixed affine map.
//! The position channel dominates that variance, which keeps LayerNorm from
//! re-amplifying a slot that has been mostly cleared.
//!
//! Every layer moves the token code from one slot into the other. Attention
//! head 0 reads the source slot one position back (or at the same position
//! once the shift is complete) and writes it to the destination slot with
//! some bits negated; the feed-forward block then erases the source slot.
//! Consecutive layers negate complementary bit sets, so a slot that is not
//! erased cancels the next code written into it, and a layer that does
//! nothing at all leaves some bits with the wrong sign. The
//! unembedding compares the sum of both slots against each token's code, and
//! adds a fixed bias to token 0 so that a weak or missing code reads as 0.
//!
//! Channels `c` with `c % 4 < 2` of the value projection and of the hidden
//! feed-forward layer carry a position-dependent filler that nothing reads.
//! Scaling exactly those channels inflates the block maxima that the useful
//! channels share, which is what makes low-precision blocks fail there.

use super::{ModelDims, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::{LayerWeights, LN_EPS};
use crate::tensor::Tensor;

pub const PLANTED_DIMS: ModelDims = ModelDims {
    vocab: 16,
    d_model: 32,
    d_ff: 16,
    heads: 2,
    layers: 6,
    seq_len: 16,
};

const SLOT_A: usize = 16;
const SLOT_B: usize = 24;
const BITS: usize = 4;
pub const POS_GAIN: f64 = 16.0;
/// Attention logit gain on the position match. Large enough that the
/// selected probability rounds to exactly 1.
const BETA: f64 = 12.0;
/// Magnitude of the filler in the value projection.
const V_FILLER: f64 = 0.75;
/// Magnitude unit of the filler in the hidden feed-forward layer.
const H_FILLER: f64 = 0.25;
/// Logit gain of the unembedding.
const GAMMA: f64 = 8.0;
/// Logit bias of token 0; a code needs about half its nominal height to win.
const DEFAULT_BIAS: f64 = 8.0;
/// Magnitude of code channels in the value projection and of the erase units.
/// Kept away from powers of two so block rounding never lands on a tie.
const CODE_GAIN: f64 = 1.2;

fn code(token: usize, bit: usize) -> f64 {
    if token >> bit & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

fn hadamard(i: usize, j: usize) -> f64 {
    if (i & j).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Sign applied to bit `bit` when layer `layer` writes it.
fn flip(layer: usize, bit: usize) -> f64 {
    let mask = if bit.is_multiple_of(2) { 1.0 } else { -1.0 };
    if layer.is_multiple_of(2) {
        mask
    } else {
        -mask
    }
}

/// Filler channel `n` (0..8) in a 16-wide head or hidden layer.
fn filler_channel(n: usize) -> usize {
    4 * (n / 2) + n % 2
}

/// LayerNorm denominator of a row holding one position entry and `slots`
/// full token slots.
fn ln_sigma(slots: usize) -> f64 {
    let n = PLANTED_DIMS.d_model as f64;
    let mean = POS_GAIN / n;
    let mean_sq = (POS_GAIN * POS_GAIN + (2 * BITS * slots) as f64) / n;
    (mean_sq - mean * mean + LN_EPS).sqrt()
}

/// Copy-task model for `Task::Copy { shift }` with the dimensions of
/// [`PLANTED_DIMS`]. The first `shift` layers move the code back one
/// position, the remaining layers keep it in place.
pub fn build_copy_model(shift: usize) -> Result<ToyModel> {
    let dims = PLANTED_DIMS;
    if shift > dims.layers {
        return Err(Error::Config(format!(
            "shift {shift} needs more than {} layers",
            dims.layers
        )));
    }
    let (d, f, s) = (dims.d_model, dims.d_ff, dims.seq_len);
    let sigma1 = ln_sigma(1);
    let sigma2 = ln_sigma(2);

    let mut layers = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let (src, dst) = if l % 2 == 0 {
            (SLOT_A, SLOT_B)
        } else {
            (SLOT_B, SLOT_A)
        };
        let back = usize::from(l < shift);

        let mut w_q = Tensor::zeros(d, d);
        let mut w_k = Tensor::zeros(d, d);
        for p in 0..s {
            w_q.set(p, (p + s - back) % s, BETA);
            w_k.set(p, p, 1.0);
        }

        let mut w_v = Tensor::zeros(d, d);
        let mut w_o = Tensor::zeros(d, d);
        let mut w_1 = Tensor::zeros(d, f);
        let mut b_1 = vec![0.0; f];
        let mut w_2 = Tensor::zeros(f, d);
        for i in 0..BITS {
            let (plus, minus) = (4 * i + 2, 4 * i + 3);
            let (hi, lo) = (src + 2 * i, src + 2 * i + 1);
            for (col, sign) in [(plus, CODE_GAIN), (minus, -CODE_GAIN)] {
                w_v.set(hi, col, sign * sigma1 / 2.0);
                w_v.set(lo, col, -sign * sigma1 / 2.0);
                w_1.set(hi, col, sign * sigma2 / 2.0);
                w_1.set(lo, col, -sign * sigma2 / 2.0);
            }
            let f = flip(l, i);
            w_o.set(plus, dst + 2 * i, f / CODE_GAIN);
            w_o.set(minus, dst + 2 * i + 1, f / CODE_GAIN);
            w_2.set(plus, hi, -1.0 / CODE_GAIN);
            w_2.set(minus, hi, 1.0 / CODE_GAIN);
            w_2.set(plus, lo, 1.0 / CODE_GAIN);
            w_2.set(minus, lo, -1.0 / CODE_GAIN);
        }
        for n in 0..8 {
            let c = filler_channel(n);
            for p in 0..s {
                let h = hadamard(n + 1, p);
                w_v.set(p, c, V_FILLER * sigma1 / POS_GAIN * h);
                w_1.set(p, c, H_FILLER * sigma2 / POS_GAIN * h);
            }
            b_1[c] = 2.0 * H_FILLER;
        }

        layers.push(LayerWeights {
            heads: dims.heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_o: vec![0.0; d],
            w_1,
            b_1,
            w_2,
            b_2: vec![0.0; d],
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
        });
    }

    let mut embed = Tensor::zeros(dims.vocab, d);
    let mut unembed = Tensor::zeros(d, dims.vocab);
    for tok in 0..dims.vocab {
        for i in 0..BITS {
            let b = code(tok, i);
            let sign: f64 = (0..dims.layers).map(|l| flip(l, i)).product();
            embed.set(tok, SLOT_A + 2 * i, b);
            embed.set(tok, SLOT_A + 2 * i + 1, -b);
            for slot in [SLOT_A, SLOT_B] {
                unembed.set(slot + 2 * i, tok, sign * GAMMA * b / 2.0);
                unembed.set(slot + 2 * i + 1, tok, -sign * GAMMA * b / 2.0);
            }
        }
    }
    for p in 0..s {
        unembed.set(p, 0, DEFAULT_BIAS / POS_GAIN);
    }
    let pos = Tensor::from_fn(s, d, |r, c| if r == c { POS_GAIN } else { 0.0 });

    let model = ToyModel {
        dims,
        seed: 0,
        embed,
        pos,
        layers,
        unembed,
    };
    model.validate()?;
    Ok(model)
}
