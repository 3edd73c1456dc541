//! Storage and arithmetic cost of quantization configs, quantization error,
//! and variance profiles of the intermediate tensors.

mod density;
mod profile;
mod qerror;

pub use density::{
    arithmetic_density, config_arithmetic_density, density_report, memory_density, operand_shape,
    site_macs, AreaRow, AreaTable, DensityReport, SiteDensity, FP32_BITS,
};
pub use profile::{variance_profile, ProfileSite, RunningVariance, SiteVariance, VarianceProfile};
pub use qerror::{quant_error, QuantError};
