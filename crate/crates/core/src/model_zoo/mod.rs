//! Toy Transformer models, synthetic datasets and activation-scale injection.

mod codec;
mod dataset;
mod planted;

pub use codec::{decode_model, encode_model, MODEL_MAGIC};
pub use dataset::{synth_dataset, Dataset, Task};
pub use planted::{build_copy_model, PLANTED_DIMS};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    forward_prepared, prepare_layer, LayerWeights, PreparedLayer, Probe, QuantConfig,
};
use crate::tensor::Tensor;

/// Largest accepted value of any single dimension.
pub const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub seq_len: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("layers", self.layers),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in all {
            if v == 0 || v > MAX_DIM {
                return Err(Error::Config(format!(
                    "{name} = {v} is outside 1..={MAX_DIM}"
                )));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of binary64 parameters stored for a model of these dimensions.
    pub fn parameter_count(&self) -> Option<usize> {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = (4 * d)
            .checked_mul(d)?
            .checked_add(2 * d.checked_mul(f)?)?
            .checked_add(6 * d + f)?;
        let emb = self.vocab.checked_mul(d)?;
        per_layer
            .checked_mul(self.layers)?
            .checked_add(2 * emb)?
            .checked_add(self.seq_len.checked_mul(d)?)
    }
}

/// Token embedding, learned positions, a stack of layers and an unembedding.
/// Logits are `X_L * unembed`, with no final normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub seed: u64,
    /// `[vocab, d_model]`
    pub embed: Tensor,
    /// `[seq_len, d_model]`
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    /// `[d_model, vocab]`
    pub unembed: Tensor,
}

impl ToyModel {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims;
        if self.layers.len() != d.layers {
            return Err(Error::Shape(format!(
                "{} layers stored, dims say {}",
                self.layers.len(),
                d.layers
            )));
        }
        let mats = [
            ("embed", &self.embed, [d.vocab, d.d_model]),
            ("pos", &self.pos, [d.seq_len, d.d_model]),
            ("unembed", &self.unembed, [d.d_model, d.vocab]),
        ];
        for (name, m, shape) in mats {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.all_finite() {
                return Err(Error::InvalidInput(format!("{name} has non-finite values")));
            }
        }
        for l in &self.layers {
            if l.heads != d.heads || l.d_model() != d.d_model || l.d_ff() != d.d_ff {
                return Err(Error::Shape(
                    "layer dimensions disagree with model dims".into(),
                ));
            }
            l.validate()?;
        }
        Ok(())
    }

    /// Layers with weight operands cast under `qcfg`.
    pub fn prepare(&self, qcfg: &QuantConfig) -> Result<Vec<PreparedLayer>> {
        qcfg.check_layers(self.dims.layers)?;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, w)| prepare_layer(w, qcfg.layer(i)?))
            .collect()
    }

    /// Residual-stream input for a token sequence.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.len() > self.dims.seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds seq_len {}",
                tokens.len(),
                self.dims.seq_len
            )));
        }
        let d = self.dims.d_model;
        let mut x = Tensor::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.dims.vocab {
                return Err(Error::InvalidInput(format!(
                    "token {tok} outside the vocabulary"
                )));
            }
            let e = self.embed.row(tok as usize);
            let p = self.pos.row(t);
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        Ok(x)
    }

    /// Logits `[tokens.len(), vocab]`.
    pub fn forward(
        &self,
        tokens: &[u32],
        prepared: &[PreparedLayer],
        mut observer: Option<&mut dyn FnMut(usize, Probe, &Tensor)>,
    ) -> Result<Tensor> {
        let mut x = self.embed_tokens(tokens)?;
        for (i, layer) in prepared.iter().enumerate() {
            x = match observer.as_mut() {
                Some(f) => {
                    let mut per_layer = |p: Probe, t: &Tensor| f(i, p, t);
                    forward_prepared(&x, layer, Some(&mut per_layer))?
                }
                None => forward_prepared(&x, layer, None)?,
            };
        }
        crate::linalg::gemm_ref(&x, &self.unembed)
    }
}

/// Gaussian weights with standard deviation `1/sqrt(d_model)`, unit LayerNorm
/// gains and zero biases.
pub fn build_toy_model(dims: ModelDims, seed: u64) -> Result<ToyModel> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (dims.d_model as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |r: usize, c: usize| Tensor::from_fn(r, c, |_, _| normal.sample(&mut rng));
    let (d, f) = (dims.d_model, dims.d_ff);
    let embed = draw(dims.vocab, d);
    let pos = draw(dims.seq_len, d);
    let layers = (0..dims.layers)
        .map(|_| LayerWeights {
            heads: dims.heads,
            w_q: draw(d, d),
            w_k: draw(d, d),
            w_v: draw(d, d),
            w_o: draw(d, d),
            b_o: vec![0.0; d],
            w_1: draw(d, f),
            b_1: vec![0.0; f],
            w_2: draw(f, d),
            b_2: vec![0.0; d],
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
        })
        .collect();
    let unembed = draw(d, dims.vocab);
    Ok(ToyModel {
        dims,
        seed,
        embed,
        pos,
        layers,
        unembed,
    })
}

/// Which channels of a scaled tensor are multiplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSelect {
    All,
    /// Channel `c` is scaled when `c % period < active`.
    Periodic {
        period: usize,
        active: usize,
    },
}

impl ChannelSelect {
    pub fn contains(&self, c: usize) -> bool {
        match *self {
            ChannelSelect::All => true,
            ChannelSelect::Periodic { period, active } => c % period < active,
        }
    }
}

/// Per-layer activation multipliers (powers of two, at least 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingOffsetPlan {
    pub multipliers: BTreeMap<usize, f64>,
    #[serde(default = "all_channels")]
    pub channels: ChannelSelect,
}

fn all_channels() -> ChannelSelect {
    ChannelSelect::All
}

impl ScalingOffsetPlan {
    pub fn new(
        multipliers: impl IntoIterator<Item = (usize, f64)>,
        channels: ChannelSelect,
    ) -> Self {
        ScalingOffsetPlan {
            multipliers: multipliers.into_iter().collect(),
            channels,
        }
    }
}

/// Multiplies the selected value-projection columns and first feed-forward
/// columns (with their bias) of each planned layer by its multiplier, and
/// divides the matching rows of the output projection and second
/// feed-forward matrix. The FP64 function is unchanged while `V`, `B_c` and
/// `B_1` grow by the multiplier in the selected channels.
pub fn inject_scaling_offsets(model: &ToyModel, plan: &ScalingOffsetPlan) -> Result<ToyModel> {
    if let ChannelSelect::Periodic { period, active } = plan.channels {
        if period == 0 || active == 0 || active > period {
            return Err(Error::Config(format!(
                "periodic channel selection needs 0 < active <= period, got {active}/{period}"
            )));
        }
    }
    let mut out = model.clone();
    for (&layer, &m) in &plan.multipliers {
        if layer >= model.layers.len() {
            return Err(Error::Config(format!(
                "scaling offset for layer {layer} of a {}-layer model",
                model.layers.len()
            )));
        }
        let (mant, _) = frexp(m);
        if !(m.is_finite() && m >= 1.0 && mant == 0.5) {
            return Err(Error::Config(format!(
                "multiplier {m} is not a power of two >= 1"
            )));
        }
        let w = &mut out.layers[layer];
        let sel = plan.channels;
        let d = w.d_model();
        for c in (0..d).filter(|&c| sel.contains(c)) {
            for r in 0..d {
                w.w_v.set(r, c, w.w_v.get(r, c) * m);
            }
            for v in w.w_o.row_mut(c) {
                *v /= m;
            }
        }
        for c in (0..w.d_ff()).filter(|&c| sel.contains(c)) {
            for r in 0..d {
                w.w_1.set(r, c, w.w_1.get(r, c) * m);
            }
            w.b_1[c] *= m;
            for v in w.w_2.row_mut(c) {
                *v /= m;
            }
        }
    }
    Ok(out)
}

/// Mantissa in `[0.5, 1)` and exponent of a positive finite value.
fn frexp(x: f64) -> (f64, i64) {
    if x <= 0.0 || !x.is_finite() {
        return (0.0, 0);
    }
    let e = crate::formats::floor_log2(x) + 1;
    (x / crate::formats::pow2(e), e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Exact-match fraction over labelled positions.
    pub accuracy: f64,
    /// Mean cross-entropy in nats over labelled positions.
    pub mean_loss: f64,
    pub labels: usize,
}

fn score_sequence(
    model: &ToyModel,
    data: &Dataset,
    i: usize,
    prepared: &[PreparedLayer],
) -> Result<(usize, f64)> {
    let logits = model.forward(&data.sequences[i], prepared, None)?;
    let mut correct = 0;
    let mut loss = 0.0;
    for (t, label) in data.labels(i) {
        let row = logits.row(t);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label as usize {
            correct += 1;
        }
        let max = row[best];
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label as usize];
    }
    Ok((correct, loss))
}

/// Accuracy and loss of `model` on `data` with every GEMM site cast per
/// `qcfg`. Sequences are scored in parallel and reduced in dataset order.
pub fn evaluate(model: &ToyModel, data: &Dataset, qcfg: &QuantConfig) -> Result<EvalResult> {
    if data.vocab != model.dims.vocab || data.seq_len > model.dims.seq_len {
        return Err(Error::Config(format!(
            "dataset (vocab {}, seq_len {}) does not fit the model (vocab {}, seq_len {})",
            data.vocab, data.seq_len, model.dims.vocab, model.dims.seq_len
        )));
    }
    let prepared = model.prepare(qcfg)?;
    let per_seq = (0..data.len())
        .into_par_iter()
        .map(|i| score_sequence(model, data, i, &prepared))
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0;
    let mut loss = 0.0;
    for (c, l) in per_seq {
        correct += c;
        loss += l;
    }
    let n = data.label_count();
    if n == 0 {
        return Err(Error::Config("dataset has no labelled positions".into()));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
        labels: n,
    })
}
