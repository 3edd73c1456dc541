use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{QuantConfig, TensorSite};
use crate::quantizer::{BlockFormat, BlockShape, DEFAULT_BLOCK};

pub const DEFAULT_WIDTHS: [u32; 5] = [4, 5, 6, 7, 8];
/// Shared exponent width of every searched BFP format.
pub const SHARED_EXPONENT_BITS: u32 = 8;

/// How block shapes enter the search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockChoice {
    /// One shape everywhere; not searched.
    Fixed { block: BlockShape },
    /// One shape for weights and one for activations; not searched.
    PerRole {
        weight: BlockShape,
        activation: BlockShape,
    },
    /// Searched: weights pick from `[1,16]`, `[1,32]`, activations from
    /// `[1,8]`, `[1,16]`.
    VariationAware,
}

impl Default for BlockChoice {
    fn default() -> Self {
        BlockChoice::Fixed {
            block: DEFAULT_BLOCK,
        }
    }
}

impl BlockChoice {
    fn candidates(&self, weight: bool) -> Vec<BlockShape> {
        match (self, weight) {
            (BlockChoice::Fixed { block }, _) => vec![*block],
            (BlockChoice::PerRole { weight: w, .. }, true) => vec![*w],
            (BlockChoice::PerRole { activation: a, .. }, false) => vec![*a],
            (BlockChoice::VariationAware, true) => vec![[1, 16], [1, 32]],
            (BlockChoice::VariationAware, false) => vec![[1, 8], [1, 16]],
        }
    }
}

/// Candidates for one tensor site. Widths count the sign bit, so width `w`
/// is BFP with `w - 1` mantissa bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteChoices {
    pub site: TensorSite,
    pub widths: Vec<u32>,
    pub blocks: Vec<BlockShape>,
}

/// Per-operand categorical search space. Every site contributes a width
/// dimension and a block dimension (possibly with a single choice).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub sites: Vec<SiteChoices>,
}

impl SearchSpace {
    pub fn new(layers: usize, widths: &[u32], blocks: &BlockChoice) -> Result<Self> {
        let space = SearchSpace {
            sites: TensorSite::all(layers)
                .into_iter()
                .map(|site| SiteChoices {
                    site,
                    widths: widths.to_vec(),
                    blocks: blocks.candidates(site.is_weight()),
                })
                .collect(),
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("search space has no sites".into()));
        }
        for s in &self.sites {
            if s.widths.is_empty() || s.blocks.is_empty() {
                return Err(Error::Config(format!("site {} has no candidates", s.site)));
            }
            if let Some(w) = s.widths.iter().find(|w| !(2..=8).contains(*w)) {
                return Err(Error::Config(format!(
                    "site {}: width {w} outside 2..=8",
                    s.site
                )));
            }
            for &b in &s.blocks {
                BlockFormat::bfp(s.widths[0], b).validate()?;
            }
        }
        Ok(())
    }

    /// Choice count of each categorical dimension, two per site.
    pub fn dimensions(&self) -> Vec<usize> {
        self.sites
            .iter()
            .flat_map(|s| [s.widths.len(), s.blocks.len()])
            .collect()
    }

    /// Number of distinct configs (as a float; it overflows integers fast).
    pub fn size(&self) -> f64 {
        self.dimensions().iter().map(|&n| n as f64).product()
    }

    pub fn decode(&self, choices: &[usize]) -> QuantConfig {
        let mut q = QuantConfig::new();
        for (s, c) in self.sites.iter().zip(choices.chunks_exact(2)) {
            q.set(s.site, BlockFormat::bfp(s.widths[c[0]], s.blocks[c[1]]));
        }
        q
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn encode(&self, config: &QuantConfig) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(2 * self.sites.len());
        for s in &self.sites {
            let f = config.get(s.site)?;
            let not_in_space =
                || Error::Config(format!("site {}: {f:?} is not in the space", s.site));
            let BlockFormat::Bfp {
                mantissa_bits,
                exponent_bits: SHARED_EXPONENT_BITS,
                block,
            } = f
            else {
                return Err(not_in_space());
            };
            let w = s
                .widths
                .iter()
                .position(|&w| w == mantissa_bits + 1)
                .ok_or_else(not_in_space)?;
            let b = s
                .blocks
                .iter()
                .position(|&b| b == block)
                .ok_or_else(not_in_space)?;
            out.extend([w, b]);
        }
        Ok(out)
    }
}
