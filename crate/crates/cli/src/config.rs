//! Run configuration documents.
//!
//! One JSON object per run. Keys a command does not use are rejected, as
//! are unknown keys. Relative paths inside the document are resolved
//! against the directory of the config file. Command-line flags override
//! the matching keys (`seed`, `workers`, `out`, `output_format`), which
//! override the defaults.

use std::path::{Path, PathBuf};

use blockquant::analysis::ProfileSite;
use blockquant::linalg::QuantConfig;
use blockquant::model_zoo::{ModelDims, ScalingOffsetPlan, Task};
use blockquant::quantizer::BlockFormat;
use blockquant::search::{BlockChoice, SearchParams, DEFAULT_PATIENCE, DEFAULT_WIDTHS};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Quantize,
    Eval,
    Density,
    Profile,
    Search,
    Report,
    BuildModel,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Quantize => "quantize",
            Command::Eval => "eval",
            Command::Density => "density",
            Command::Profile => "profile",
            Command::Search => "search",
            Command::Report => "report",
            Command::BuildModel => "build-model",
        }
    }

    /// Keys accepted besides the common ones.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Quantize => &["input", "format"],
            Command::Eval => &["model", "offsets", "dataset", "quant"],
            Command::Density => &["dims", "quant"],
            Command::Profile => &["model", "offsets", "dataset", "sites"],
            Command::Search => &[
                "model",
                "offsets",
                "dataset",
                "space",
                "budget",
                "alpha",
                "patience",
                "calibration_budget",
                "search",
                "thresholds",
            ],
            Command::Report => &["trials", "thresholds"],
            Command::BuildModel => &["model", "offsets"],
        }
    }
}

const COMMON_KEYS: [&str; 4] = ["seed", "workers", "out", "output_format"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// A model file written by `build-model`.
    File { path: PathBuf },
    /// Gaussian weights; `seed` defaults to the run seed.
    Random {
        dims: ModelDims,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The hand-built copy-task model.
    Planted { shift: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub size: usize,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    #[serde(default = "default_widths")]
    pub widths: Vec<u32>,
    #[serde(default)]
    pub blocks: BlockChoice,
}

fn default_widths() -> Vec<u32> {
    DEFAULT_WIDTHS.to_vec()
}

impl Default for SpaceSpec {
    fn default() -> Self {
        SpaceSpec {
            widths: default_widths(),
            blocks: BlockChoice::default(),
        }
    }
}

/// A fixed α, or `"calibrate"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    #[serde(serialize_with = "ser_calibrate")]
    Calibrate,
}

fn ser_calibrate<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str("calibrate")
}

impl<'de> Deserialize<'de> for AlphaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AlphaSpec::Value(v)),
            Raw::Str(s) if s == "calibrate" => Ok(AlphaSpec::Calibrate),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "alpha must be a number or \"calibrate\", got {s:?}"
            ))),
        }
    }
}

/// Trial filter. For searches `acc_floor` defaults to FP32 accuracy minus
/// `acc_drop`; for reports it defaults to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default)]
    pub acc_floor: Option<f64>,
    #[serde(default = "default_acc_drop")]
    pub acc_drop: f64,
    #[serde(default)]
    pub mem_floor: f64,
}

fn default_acc_drop() -> f64 {
    0.02
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            acc_floor: None,
            acc_drop: default_acc_drop(),
            mem_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub output_format: Option<OutputFormat>,

    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub offsets: Option<ScalingOffsetPlan>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub dims: Option<ModelDims>,

    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<BlockFormat>,

    #[serde(default)]
    pub sites: Option<Vec<ProfileSite>>,

    #[serde(default)]
    pub space: Option<SpaceSpec>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub alpha: Option<AlphaSpec>,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub calibration_budget: Option<usize>,
    #[serde(default)]
    pub search: Option<SearchParams>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,

    #[serde(default)]
    pub trials: Option<PathBuf>,
}

pub const DEFAULT_BUDGET: usize = 300;

/// Flag values that take precedence over the document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub output_format: Option<OutputFormat>,
}

/// Parses a config document for `command`.
pub fn parse_run_config(text: &str, command: Command) -> CliResult<RunConfig> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    for key in obj.keys() {
        if !COMMON_KEYS.contains(&key.as_str()) && !command.keys().contains(&key.as_str()) {
            return Err(CliError::Config(format!(
                "key {key:?} is not used by the {} command",
                command.name()
            )));
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if o.output_format.is_some() {
            self.output_format = o.output_format;
        }
    }

    /// Makes relative input paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.input.as_mut() {
            fix(p);
        }
        if let Some(p) = self.trials.as_mut() {
            fix(p);
        }
        if let Some(ModelSpec::File { path }) = self.model.as_mut() {
            fix(path);
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn budget(&self) -> usize {
        self.budget.unwrap_or(DEFAULT_BUDGET)
    }

    pub fn patience(&self) -> usize {
        self.patience.unwrap_or(DEFAULT_PATIENCE)
    }

    pub fn alpha(&self) -> AlphaSpec {
        self.alpha.unwrap_or(AlphaSpec::Calibrate)
    }
}

pub fn require<'a, T>(field: &'a Option<T>, name: &str, command: Command) -> CliResult<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("the {} command needs \"{name}\"", command.name())))
}
