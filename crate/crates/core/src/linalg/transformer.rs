//! Single Transformer layer with fake quantization at its eight GEMM sites.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{gemm_ref, layer_norm, relu, softmax_lastaxis};
use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize, BlockFormat};
use crate::tensor::Tensor;

/// LayerNorm epsilon used by the forward pass.
pub const LN_EPS: f64 = 1e-5;

/// The eight matrix multiplications of a Transformer layer, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GemmSite {
    QProj,
    KProj,
    VProj,
    Qkt,
    Av,
    OutProj,
    Fc1,
    Fc2,
}

impl GemmSite {
    pub const ALL: [GemmSite; 8] = [
        GemmSite::QProj,
        GemmSite::KProj,
        GemmSite::VProj,
        GemmSite::Qkt,
        GemmSite::Av,
        GemmSite::OutProj,
        GemmSite::Fc1,
        GemmSite::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GemmSite::QProj => "q_proj",
            GemmSite::KProj => "k_proj",
            GemmSite::VProj => "v_proj",
            GemmSite::Qkt => "qk",
            GemmSite::Av => "av",
            GemmSite::OutProj => "out_proj",
            GemmSite::Fc1 => "fc1",
            GemmSite::Fc2 => "fc2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the right-hand operand is a weight. Sites `qk` and `av`
    /// multiply two activations.
    pub fn b_is_weight(self) -> bool {
        !matches!(self, GemmSite::Qkt | GemmSite::Av)
    }
}

impl FromStr for GemmSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GemmSite::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown GEMM site {s:?}")))
    }
}

/// Left (`A`) or right (`B`) operand of `A * B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    A,
    B,
}

/// One quantized tensor position: `"{layer}.{site}.{a|b}"`, e.g. `"3.fc1.b"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TensorSite {
    pub layer: usize,
    pub site: GemmSite,
    pub operand: Operand,
}

impl TensorSite {
    pub fn new(layer: usize, site: GemmSite, operand: Operand) -> Self {
        TensorSite {
            layer,
            site,
            operand,
        }
    }

    pub fn is_weight(&self) -> bool {
        self.operand == Operand::B && self.site.b_is_weight()
    }

    /// All sixteen operand sites of each of `layers` layers, in order.
    pub fn all(layers: usize) -> Vec<TensorSite> {
        let mut out = Vec::with_capacity(layers * 16);
        for layer in 0..layers {
            for site in GemmSite::ALL {
                for operand in [Operand::A, Operand::B] {
                    out.push(TensorSite::new(layer, site, operand));
                }
            }
        }
        out
    }
}

impl fmt::Display for TensorSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.operand {
            Operand::A => "a",
            Operand::B => "b",
        };
        write!(f, "{}.{}.{}", self.layer, self.site.name(), op)
    }
}

impl TryFrom<String> for TensorSite {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TensorSite> for String {
    fn from(s: TensorSite) -> String {
        s.to_string()
    }
}

impl FromStr for TensorSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed site key {s:?}, expected LAYER.SITE.a|b"));
        let mut parts = s.split('.');
        let (Some(layer), Some(site), Some(op), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let layer = layer.parse().map_err(|_| bad())?;
        let operand = match op {
            "a" => Operand::A,
            "b" => Operand::B,
            _ => return Err(bad()),
        };
        Ok(TensorSite::new(layer, site.parse()?, operand))
    }
}

/// Map from tensor site to block format, with an optional fallback format
/// for sites not listed.
///
/// Block shapes are written in the orientation of the left operand: `[1,16]`
/// means sixteen consecutive elements along the reduction dimension. Right
/// operands are blocked with the transposed shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantConfigDoc", into = "QuantConfigDoc")]
pub struct QuantConfig {
    default: Option<BlockFormat>,
    sites: BTreeMap<TensorSite, BlockFormat>,
}

/// JSON form of [`QuantConfig`]: `{"default": FORMAT?, "sites": {"0.q_proj.a": FORMAT, ...}}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<BlockFormat>,
    #[serde(default)]
    pub sites: BTreeMap<String, BlockFormat>,
}

impl TryFrom<QuantConfigDoc> for QuantConfig {
    type Error = Error;

    fn try_from(doc: QuantConfigDoc) -> Result<Self> {
        let mut sites = BTreeMap::new();
        for (k, v) in doc.sites {
            sites.insert(k.parse()?, v);
        }
        Ok(QuantConfig {
            default: doc.default,
            sites,
        })
    }
}

impl From<QuantConfig> for QuantConfigDoc {
    fn from(c: QuantConfig) -> Self {
        QuantConfigDoc {
            default: c.default,
            sites: c
                .sites
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl QuantConfig {
    /// Empty map; every lookup fails until sites or a default are set.
    pub fn new() -> Self {
        Self::default()
    }

    /// Same format at every site.
    pub fn uniform(format: BlockFormat) -> Self {
        QuantConfig {
            default: Some(format),
            sites: BTreeMap::new(),
        }
    }

    pub fn identity() -> Self {
        Self::uniform(BlockFormat::Identity)
    }

    pub fn set(&mut self, site: TensorSite, format: BlockFormat) -> &mut Self {
        self.sites.insert(site, format);
        self
    }

    pub fn set_default(&mut self, format: Option<BlockFormat>) -> &mut Self {
        self.default = format;
        self
    }

    pub fn default_format(&self) -> Option<BlockFormat> {
        self.default
    }

    pub fn explicit_sites(&self) -> &BTreeMap<TensorSite, BlockFormat> {
        &self.sites
    }

    pub fn get(&self, site: TensorSite) -> Result<BlockFormat> {
        self.sites
            .get(&site)
            .copied()
            .or(self.default)
            .ok_or_else(|| Error::Config(format!("no format for site {site}")))
    }

    pub fn layer(&self, layer: usize) -> Result<LayerQuant> {
        let mut formats = [[BlockFormat::Identity; 2]; 8];
        for site in GemmSite::ALL {
            formats[site.index()] = [
                self.get(TensorSite::new(layer, site, Operand::A))?,
                self.get(TensorSite::new(layer, site, Operand::B))?,
            ];
        }
        Ok(LayerQuant { formats })
    }

    /// Fails unless every site of a `layers`-layer model resolves, and
    /// rejects explicit sites beyond the last layer.
    pub fn check_layers(&self, layers: usize) -> Result<()> {
        if let Some(site) = self.sites.keys().find(|s| s.layer >= layers) {
            return Err(Error::Config(format!(
                "site {site} refers to a layer outside a {layers}-layer model"
            )));
        }
        for l in 0..layers {
            self.layer(l)?;
        }
        Ok(())
    }
}

/// Resolved formats for the sixteen operands of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuant {
    formats: [[BlockFormat; 2]; 8],
}

impl LayerQuant {
    pub fn get(&self, site: GemmSite, operand: Operand) -> BlockFormat {
        self.formats[site.index()][operand as usize]
    }

    fn apply(&self, t: &Tensor, site: GemmSite, operand: Operand) -> Result<Tensor> {
        let f = self.get(site, operand);
        match operand {
            Operand::A => fake_quantize(t, &f),
            Operand::B => fake_quantize(t, &f.transposed()),
        }
    }
}

/// Parameters of one layer. Projection matrices multiply from the right:
/// `Q = X_n * w_q`, with head `i` using columns `i*d_k..(i+1)*d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Vec<f64>,
    pub w_1: Tensor,
    pub b_1: Vec<f64>,
    pub w_2: Tensor,
    pub b_2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl LayerWeights {
    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let f = self.d_ff();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "d_model {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let mats = [
            ("w_q", &self.w_q, [d, d]),
            ("w_k", &self.w_k, [d, d]),
            ("w_v", &self.w_v, [d, d]),
            ("w_o", &self.w_o, [d, d]),
            ("w_1", &self.w_1, [d, f]),
            ("w_2", &self.w_2, [f, d]),
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
        let vecs = [
            ("b_o", &self.b_o, d),
            ("b_1", &self.b_1, f),
            ("b_2", &self.b_2, d),
            ("ln1_gain", &self.ln1_gain, d),
            ("ln1_bias", &self.ln1_bias, d),
            ("ln2_gain", &self.ln2_gain, d),
            ("ln2_bias", &self.ln2_bias, d),
        ];
        for (name, v, len) in vecs {
            if v.len() != len {
                return Err(Error::Shape(format!(
                    "{name} has length {}, expected {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }
}

/// Intermediate tensors with unbounded range that the forward pass exposes
/// to an observer. `Q`, `K` and `V` are reported per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Probe {
    Q,
    K,
    V,
    Bc,
    B1,
}

impl Probe {
    pub const ALL: [Probe; 5] = [Probe::Q, Probe::K, Probe::V, Probe::Bc, Probe::B1];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Q => "q",
            Probe::K => "k",
            Probe::V => "v",
            Probe::Bc => "b_c",
            Probe::B1 => "b_1",
        }
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile tensor {s:?}")))
    }
}

/// A layer with its weight operands already fake-quantized, so repeated
/// forward passes under one config skip re-casting the weights.
#[derive(Debug, Clone)]
pub struct PreparedLayer {
    quant: LayerQuant,
    weights: LayerWeights,
}

pub fn prepare_layer(weights: &LayerWeights, quant: LayerQuant) -> Result<PreparedLayer> {
    weights.validate()?;
    let mut w = weights.clone();
    w.w_q = quant.apply(&weights.w_q, GemmSite::QProj, Operand::B)?;
    w.w_k = quant.apply(&weights.w_k, GemmSite::KProj, Operand::B)?;
    w.w_v = quant.apply(&weights.w_v, GemmSite::VProj, Operand::B)?;
    w.w_o = quant.apply(&weights.w_o, GemmSite::OutProj, Operand::B)?;
    w.w_1 = quant.apply(&weights.w_1, GemmSite::Fc1, Operand::B)?;
    w.w_2 = quant.apply(&weights.w_2, GemmSite::Fc2, Operand::B)?;
    Ok(PreparedLayer { quant, weights: w })
}

pub fn forward_prepared(
    x: &Tensor,
    layer: &PreparedLayer,
    mut observer: Option<&mut dyn FnMut(Probe, &Tensor)>,
) -> Result<Tensor> {
    let w = &layer.weights;
    let lq = &layer.quant;
    let d = w.d_model();
    if x.cols() != d {
        return Err(Error::Shape(format!(
            "input has {} columns, layer expects {d}",
            x.cols()
        )));
    }
    if !x.all_finite() {
        return Err(Error::InvalidInput(
            "layer input has non-finite values".into(),
        ));
    }
    let mut observe = |p: Probe, t: &Tensor| {
        if let Some(f) = observer.as_mut() {
            f(p, t);
        }
    };
    let dk = d / w.heads;
    let scale = (dk as f64).sqrt();

    let xn = layer_norm(x, &w.ln1_gain, &w.ln1_bias, LN_EPS)?;
    let q = gemm_ref(&lq.apply(&xn, GemmSite::QProj, Operand::A)?, &w.w_q)?;
    let k = gemm_ref(&lq.apply(&xn, GemmSite::KProj, Operand::A)?, &w.w_k)?;
    let v = gemm_ref(&lq.apply(&xn, GemmSite::VProj, Operand::A)?, &w.w_v)?;

    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qi = q.col_slice(h * dk, dk);
        let ki = k.col_slice(h * dk, dk);
        let vi = v.col_slice(h * dk, dk);
        observe(Probe::Q, &qi);
        observe(Probe::K, &ki);
        observe(Probe::V, &vi);
        let a = gemm_ref(
            &lq.apply(&qi, GemmSite::Qkt, Operand::A)?,
            &lq.apply(&ki.transpose(), GemmSite::Qkt, Operand::B)?,
        )?
        .map(|s| s / scale);
        let a_hat = softmax_lastaxis(&a);
        heads.push(gemm_ref(
            &lq.apply(&a_hat, GemmSite::Av, Operand::A)?,
            &lq.apply(&vi, GemmSite::Av, Operand::B)?,
        )?);
    }
    let bc = Tensor::hconcat(&heads)?;
    observe(Probe::Bc, &bc);
    let b0 =
        gemm_ref(&lq.apply(&bc, GemmSite::OutProj, Operand::A)?, &w.w_o)?.add_row_vector(&w.b_o)?;
    let bn = layer_norm(&b0.add(x)?, &w.ln2_gain, &w.ln2_bias, LN_EPS)?;
    let b1 = relu(
        &gemm_ref(&lq.apply(&bn, GemmSite::Fc1, Operand::A)?, &w.w_1)?.add_row_vector(&w.b_1)?,
    );
    observe(Probe::B1, &b1);
    let b2 =
        gemm_ref(&lq.apply(&b1, GemmSite::Fc2, Operand::A)?, &w.w_2)?.add_row_vector(&w.b_2)?;
    let out = b2.add(&b0)?.add(x)?;
    if !out.all_finite() {
        return Err(Error::InvalidInput("layer output is not finite".into()));
    }
    Ok(out)
}

/// Forward pass of layer `layer_index` under `qcfg`.
pub fn transformer_layer_forward(
    x: &Tensor,
    weights: &LayerWeights,
    qcfg: &QuantConfig,
    layer_index: usize,
) -> Result<Tensor> {
    let prepared = prepare_layer(weights, qcfg.layer(layer_index)?)?;
    forward_prepared(x, &prepared, None)
}
