use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{GemmSite, Operand, QuantConfig, TensorSite};
use crate::model_zoo::ModelDims;
use crate::quantizer::{block_count, BlockFormat};

/// Bits per FP32 element, the reference for both densities.
pub const FP32_BITS: f64 = 32.0;

const AREA_TABLE_JSON: &str = include_str!("../../data/area_factors.json");

/// One row of the MAC area table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaRow {
    pub method: String,
    pub config: String,
    /// Block length the MAC was synthesised for; 1 means per-element.
    pub block_size: usize,
    /// LUT-equivalent area with each DSP counted as `dsp_luts` LUTs.
    pub area_factor: f64,
    pub format: BlockFormat,
}

impl AreaRow {
    fn matches(&self, f: &BlockFormat) -> bool {
        let [r, c] = f.block();
        if self.block_size != 1 && r * c != self.block_size {
            return false;
        }
        let unit = [1, 1];
        self.format.with_block(unit) == f.with_block(unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaTable {
    pub version: u32,
    pub unit: String,
    pub dsp_luts: u32,
    pub rows: Vec<AreaRow>,
}

impl AreaTable {
    /// The table shipped with the crate.
    pub fn builtin() -> &'static AreaTable {
        static TABLE: OnceLock<AreaTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            serde_json::from_str(AREA_TABLE_JSON).expect("embedded area table is valid")
        })
    }

    pub fn fp32_area(&self) -> f64 {
        self.lookup(&BlockFormat::Identity)
            .expect("area table has an fp32 row")
            .area_factor
    }

    pub fn lookup(&self, format: &BlockFormat) -> Option<&AreaRow> {
        self.rows.iter().find(|r| r.matches(format))
    }

    fn area(&self, format: &BlockFormat) -> Result<f64> {
        self.lookup(format)
            .map(|r| r.area_factor)
            .ok_or_else(|| Error::Unsupported(format!("no area factor for {format:?}")))
    }
}

/// FP32 MAC area over the area of a MAC in `format`.
pub fn arithmetic_density(format: &BlockFormat) -> Result<f64> {
    let table = AreaTable::builtin();
    Ok(table.fp32_area() / table.area(format)?)
}

/// Operand shape of `site` as it is cast, and how many such tensors one
/// layer holds (one per head for the attention products).
pub fn operand_shape(dims: &ModelDims, site: GemmSite, operand: Operand) -> ([usize; 2], usize) {
    let (t, d, f, h) = (dims.seq_len, dims.d_model, dims.d_ff, dims.heads);
    let dk = dims.head_dim();
    use GemmSite::*;
    match (site, operand) {
        (QProj | KProj | VProj | OutProj | Fc1, Operand::A) => ([t, d], 1),
        (Fc2, Operand::A) => ([t, f], 1),
        (QProj | KProj | VProj | OutProj, Operand::B) => ([d, d], 1),
        (Fc1, Operand::B) => ([d, f], 1),
        (Fc2, Operand::B) => ([f, d], 1),
        (Qkt, Operand::A) => ([t, dk], h),
        (Qkt, Operand::B) => ([dk, t], h),
        (Av, Operand::A) => ([t, t], h),
        (Av, Operand::B) => ([t, dk], h),
    }
}

/// Multiply-accumulates of one GEMM site in one layer.
pub fn site_macs(dims: &ModelDims, site: GemmSite) -> u64 {
    let ([m, k], copies) = operand_shape(dims, site, Operand::A);
    let ([_, n], _) = operand_shape(dims, site, Operand::B);
    (copies * m * k * n) as u64
}

/// Storage of one tensor site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDensity {
    pub site: TensorSite,
    pub elements: u64,
    pub bits: u64,
    /// Element bits plus the shared bits amortized over the actual blocks.
    pub bits_per_element: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub sites: Vec<SiteDensity>,
    pub total_elements: u64,
    pub total_bits: u64,
    pub memory_density: f64,
    /// Present when every GEMM maps to a row of the area table.
    pub arithmetic_density: Option<f64>,
}

fn site_bits(dims: &ModelDims, site: TensorSite, format: &BlockFormat) -> SiteDensity {
    let (shape, copies) = operand_shape(dims, site.site, site.operand);
    let f = match site.operand {
        Operand::A => *format,
        Operand::B => format.transposed(),
    };
    let elements = (shape[0] * shape[1] * copies) as u64;
    let blocks = match f.shared_bits() {
        0 => 0,
        _ => (block_count(shape, f.block()) * copies) as u64,
    };
    let bits = elements * u64::from(f.element_bits()) + blocks * u64::from(f.shared_bits());
    SiteDensity {
        site,
        elements,
        bits,
        bits_per_element: bits as f64 / elements as f64,
    }
}

/// Per-site storage of every weight and activation operand of a model with
/// `dims` under `qcfg`.
pub fn density_report(qcfg: &QuantConfig, dims: &ModelDims) -> Result<DensityReport> {
    dims.validate()?;
    qcfg.check_layers(dims.layers)?;
    let mut sites = Vec::new();
    for site in TensorSite::all(dims.layers) {
        sites.push(site_bits(dims, site, &qcfg.get(site)?));
    }
    let total_elements = sites.iter().map(|s| s.elements).sum::<u64>();
    let total_bits = sites.iter().map(|s| s.bits).sum::<u64>();
    let arithmetic_density = config_arithmetic_density(qcfg, dims).ok();
    Ok(DensityReport {
        memory_density: FP32_BITS * total_elements as f64 / total_bits as f64,
        sites,
        total_elements,
        total_bits,
        arithmetic_density,
    })
}

/// FP32 storage over the storage of all weight and activation operands
/// under `qcfg`, each tensor weighted by its element count.
pub fn memory_density(qcfg: &QuantConfig, dims: &ModelDims) -> Result<f64> {
    Ok(density_report(qcfg, dims)?.memory_density)
}

/// MAC-weighted arithmetic density of a whole config. Each GEMM needs both
/// operands in the same table row.
pub fn config_arithmetic_density(qcfg: &QuantConfig, dims: &ModelDims) -> Result<f64> {
    dims.validate()?;
    let table = AreaTable::builtin();
    let mut macs = 0.0;
    let mut area = 0.0;
    for layer in 0..dims.layers {
        for site in GemmSite::ALL {
            let a = qcfg.get(TensorSite::new(layer, site, Operand::A))?;
            let b = qcfg.get(TensorSite::new(layer, site, Operand::B))?;
            let row_a = table.lookup(&a);
            if row_a.is_none() || row_a != table.lookup(&b) {
                return Err(Error::Unsupported(format!(
                    "layer {layer} {} mixes {a:?} and {b:?}",
                    site.name()
                )));
            }
            let n = site_macs(dims, site) as f64;
            macs += n;
            area += n * row_a.unwrap().area_factor;
        }
    }
    Ok(table.fp32_area() * macs / area)
}
