//! Binary model file.
//!
//! ```text
//! magic    5 bytes  "BQTM1"
//! dims     6 x u32  vocab, d_model, d_ff, heads, layers, seq_len
//! seed     u64
//! weights  f64 each, little-endian, in this order:
//!          embed, pos, then per layer w_q, w_k, w_v, w_o, b_o, w_1, b_1,
//!          w_2, b_2, ln1_gain, ln1_bias, ln2_gain, ln2_bias, then unembed
//! ```
//!
//! Matrices are row-major. The file length must match the dims exactly.

use super::{ModelDims, ToyModel};
use crate::error::{Error, Result};
use crate::linalg::LayerWeights;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"BQTM1";

const HEADER_LEN: usize = 5 + 6 * 4 + 8;

fn put_all(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &ToyModel) -> Vec<u8> {
    let d = model.dims;
    let params = d.parameter_count().unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params);
    out.extend_from_slice(MODEL_MAGIC);
    for v in [d.vocab, d.d_model, d.d_ff, d.heads, d.layers, d.seq_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    put_all(&mut out, model.embed.data());
    put_all(&mut out, model.pos.data());
    for l in &model.layers {
        put_all(&mut out, l.w_q.data());
        put_all(&mut out, l.w_k.data());
        put_all(&mut out, l.w_v.data());
        put_all(&mut out, l.w_o.data());
        put_all(&mut out, &l.b_o);
        put_all(&mut out, l.w_1.data());
        put_all(&mut out, &l.b_1);
        put_all(&mut out, l.w_2.data());
        put_all(&mut out, &l.b_2);
        put_all(&mut out, &l.ln1_gain);
        put_all(&mut out, &l.ln1_bias);
        put_all(&mut out, &l.ln2_gain);
        put_all(&mut out, &l.ln2_bias);
    }
    put_all(&mut out, model.unembed.data());
    out
}

struct Cursor<'a> {
    values: std::slice::ChunksExact<'a, u8>,
}

impl Cursor<'_> {
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk = self
                .values
                .next()
                .ok_or_else(|| Error::Decode("weights truncated".into()))?;
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::InvalidInput(
                    "non-finite weight in model file".into(),
                ));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        Tensor::from_vec(rows, cols, self.vec(rows * cols)?)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ToyModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..5] != MODEL_MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let field = |i: usize| {
        let at = 5 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
    };
    let dims = ModelDims {
        vocab: field(0),
        d_model: field(1),
        d_ff: field(2),
        heads: field(3),
        layers: field(4),
        seq_len: field(5),
    };
    dims.validate().map_err(|e| Error::Decode(e.to_string()))?;
    let seed = u64::from_le_bytes(bytes[29..37].try_into().unwrap());
    let expected = dims
        .parameter_count()
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Decode("model size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Decode(format!(
            "file is {} bytes, dims require {expected}",
            bytes.len()
        )));
    }

    let mut c = Cursor {
        values: bytes[HEADER_LEN..].chunks_exact(8),
    };
    let (d, f) = (dims.d_model, dims.d_ff);
    let embed = c.mat(dims.vocab, d)?;
    let pos = c.mat(dims.seq_len, d)?;
    let mut layers = Vec::with_capacity(dims.layers);
    for _ in 0..dims.layers {
        layers.push(LayerWeights {
            heads: dims.heads,
            w_q: c.mat(d, d)?,
            w_k: c.mat(d, d)?,
            w_v: c.mat(d, d)?,
            w_o: c.mat(d, d)?,
            b_o: c.vec(d)?,
            w_1: c.mat(d, f)?,
            b_1: c.vec(f)?,
            w_2: c.mat(f, d)?,
            b_2: c.vec(d)?,
            ln1_gain: c.vec(d)?,
            ln1_bias: c.vec(d)?,
            ln2_gain: c.vec(d)?,
            ln2_bias: c.vec(d)?,
        });
    }
    let unembed = c.mat(d, dims.vocab)?;
    let model = ToyModel {
        dims,
        seed,
        embed,
        pos,
        layers,
        unembed,
    };
    model.validate().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(model)
}
