use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize, BlockFormat};
use crate::tensor::Tensor;

/// Error of a tensor against its fake-quantized copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantError {
    pub mse: f64,
    /// `+inf` when the error is zero; serialized as the string `"inf"`.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub sqnr_db: f64,
    pub max_abs_err: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("bad sqnr {s:?}"))),
    }
}

pub fn quant_error(tensor: &Tensor, format: &BlockFormat) -> Result<QuantError> {
    if tensor.is_empty() {
        return Err(Error::InvalidInput("empty tensor".into()));
    }
    let q = fake_quantize(tensor, format)?;
    let n = tensor.len() as f64;
    let mut err = 0.0;
    let mut signal = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (&x, &y) in tensor.data().iter().zip(q.data()) {
        let e = x - y;
        err += e * e;
        signal += x * x;
        max_abs_err = max_abs_err.max(e.abs());
    }
    let sqnr_db = if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / err).log10()
    };
    Ok(QuantError {
        mse: err / n,
        sqnr_db,
        max_abs_err,
    })
}
