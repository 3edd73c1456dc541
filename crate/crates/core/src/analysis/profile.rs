use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Probe, QuantConfig};
use crate::model_zoo::{Dataset, ToyModel};

/// Streaming population mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningVariance {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningVariance {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[f64]) {
        for &x in xs {
            self.push(x);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

/// A profiled tensor: one of the unbounded intermediates of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ProfileSite {
    pub layer: usize,
    pub probe: Probe,
}

impl ProfileSite {
    pub fn all(layers: usize) -> Vec<ProfileSite> {
        (0..layers)
            .flat_map(|layer| Probe::ALL.map(|probe| ProfileSite { layer, probe }))
            .collect()
    }
}

impl fmt::Display for ProfileSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.probe.name())
    }
}

impl FromStr for ProfileSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, probe) = s
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("profile site {s:?} is not LAYER.TENSOR")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Config(format!("bad layer in profile site {s:?}")))?;
        Ok(ProfileSite {
            layer,
            probe: probe.parse()?,
        })
    }
}

impl TryFrom<String> for ProfileSite {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProfileSite> for String {
    fn from(s: ProfileSite) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteVariance {
    pub site: ProfileSite,
    pub variance: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub sites: Vec<SiteVariance>,
}

impl VarianceProfile {
    pub fn get(&self, site: ProfileSite) -> Option<&SiteVariance> {
        self.sites.iter().find(|s| s.site == site)
    }
}

/// Population variance of each requested tensor over every element it takes
/// across the dataset, with the model in full precision. Heads of `Q`, `K`
/// and `V` are pooled.
pub fn variance_profile(
    model: &ToyModel,
    data: &Dataset,
    sites: &[ProfileSite],
) -> Result<VarianceProfile> {
    if let Some(s) = sites.iter().find(|s| s.layer >= model.dims.layers) {
        return Err(Error::Config(format!(
            "profile site {s} is outside a {}-layer model",
            model.dims.layers
        )));
    }
    let prepared = model.prepare(&QuantConfig::identity())?;
    let mut acc: BTreeMap<ProfileSite, RunningVariance> = sites
        .iter()
        .map(|&s| (s, RunningVariance::default()))
        .collect();
    for seq in &data.sequences {
        let mut observe = |layer: usize, probe: Probe, t: &crate::tensor::Tensor| {
            if let Some(r) = acc.get_mut(&ProfileSite { layer, probe }) {
                r.extend(t.data());
            }
        };
        model.forward(seq, &prepared, Some(&mut observe))?;
    }
    Ok(VarianceProfile {
        sites: sites
            .iter()
            .map(|&site| {
                let r = acc[&site];
                SiteVariance {
                    site,
                    variance: r.variance(),
                    count: r.count(),
                }
            })
            .collect(),
    })
}
