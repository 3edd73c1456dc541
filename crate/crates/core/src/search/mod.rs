//! Per-operand mixed-precision search.
//!
//! Trials are scored `acc + alpha * mem + sum(w_i * metric_i)` and proposed
//! by a TPE sampler. Suggestions are made in fixed-size batches by a single
//! coordinator and each batch is evaluated in parallel, so results depend
//! on the seed and batch size but not on the number of worker threads.

mod space;
pub mod tpe;

pub use space::{BlockChoice, SearchSpace, SiteChoices, DEFAULT_WIDTHS, SHARED_EXPONENT_BITS};
pub use tpe::TpeParams;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{config_arithmetic_density, memory_density};
use crate::error::{Error, Result};
use crate::linalg::{QuantConfig, TensorSite};
use crate::model_zoo::{evaluate, Dataset, ToyModel};
use tpe::Observation;

/// Extra objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ArithmeticDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub metric: Metric,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extras: Vec<Term>,
}

impl Objective {
    pub fn new(alpha: f64) -> Self {
        Objective {
            alpha,
            extras: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha {} must be finite and >= 0",
                self.alpha
            )));
        }
        if self.extras.iter().any(|t| !t.weight.is_finite()) {
            return Err(Error::Config("objective weights must be finite".into()));
        }
        Ok(())
    }

    /// `metrics` holds one value per extra term, in order.
    pub fn score(&self, acc: f64, mem: f64, metrics: &[f64]) -> f64 {
        let mut s = acc + self.alpha * mem;
        for (t, m) in self.extras.iter().zip(metrics) {
            s += t.weight * m;
        }
        s
    }
}

/// What one evaluation of a config measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub acc: f64,
    pub mem: f64,
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trial {
    pub index: usize,
    pub config: QuantConfig,
    pub acc: f64,
    pub mem: f64,
    pub score: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<f64>,
}

impl Trial {
    pub fn recompute_score(&self, objective: &Objective) -> f64 {
        objective.score(self.acc, self.mem, &self.metrics)
    }
}

/// One JSON object per line.
pub fn write_trial_log(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&serde_json::to_string(t).expect("trials serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_trial_log(text: &str) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let t: Trial = serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("trial log line {}: {e}", i + 1)))?;
            if ![t.acc, t.mem, t.score].iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!(
                    "trial log line {}: non-finite value",
                    i + 1
                )));
            }
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    pub tpe: TpeParams,
    /// Suggestions made against the same history and evaluated together.
    pub batch: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            tpe: TpeParams::default(),
            batch: 4,
        }
    }
}

/// Generator for trial `index` of a search seeded with `seed`.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Search loop over an arbitrary evaluator. Stops after `budget` trials or
/// as soon as `stop` returns true for the trials so far.
pub fn search_with<E, S>(
    space: &SearchSpace,
    objective: &Objective,
    budget: usize,
    seed: u64,
    params: &SearchParams,
    eval: E,
    mut stop: S,
) -> Result<Vec<Trial>>
where
    E: Fn(&QuantConfig) -> Result<Measurement> + Sync,
    S: FnMut(&[Trial]) -> bool,
{
    space.validate()?;
    objective.validate()?;
    params.tpe.validate()?;
    if params.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let dims = space.dimensions();
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let mut choices: Vec<Vec<usize>> = Vec::with_capacity(budget);
    while trials.len() < budget {
        let start = trials.len();
        let end = (start + params.batch).min(budget);
        let history: Vec<Observation<'_>> = trials
            .iter()
            .zip(&choices)
            .map(|(t, c)| Observation {
                choices: c,
                score: t.score,
                index: t.index,
            })
            .collect();
        let batch = (start..end)
            .map(|i| tpe::suggest(&history, &dims, &params.tpe, &mut trial_rng(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let measured = batch
            .par_iter()
            .map(|c| eval(&space.decode(c)))
            .collect::<Result<Vec<_>>>()?;
        for (i, (c, m)) in batch.into_iter().zip(measured).enumerate() {
            if m.metrics.len() != objective.extras.len() {
                return Err(Error::Config(format!(
                    "evaluator returned {} metrics for {} objective terms",
                    m.metrics.len(),
                    objective.extras.len()
                )));
            }
            trials.push(Trial {
                index: start + i,
                config: space.decode(&c),
                score: objective.score(m.acc, m.mem, &m.metrics),
                acc: m.acc,
                mem: m.mem,
                seed,
                metrics: m.metrics,
            });
            choices.push(c);
        }
        if stop(&trials) {
            break;
        }
    }
    Ok(trials)
}

/// Accuracy, memory density and extra metrics of `config` on a model.
pub fn measure(
    model: &ToyModel,
    data: &Dataset,
    objective: &Objective,
    config: &QuantConfig,
) -> Result<Measurement> {
    let acc = evaluate(model, data, config)?.accuracy;
    let mem = memory_density(config, &model.dims)?;
    let metrics = objective
        .extras
        .iter()
        .map(|t| match t.metric {
            Metric::ArithmeticDensity => config_arithmetic_density(config, &model.dims),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Measurement { acc, mem, metrics })
}

/// A search over a toy model; the unit that α calibration and the CLI
/// drive.
#[derive(Debug, Clone, Copy)]
pub struct ModelSearch<'a> {
    pub model: &'a ToyModel,
    pub data: &'a Dataset,
    pub space: &'a SearchSpace,
    pub params: SearchParams,
    pub seed: u64,
}

impl ModelSearch<'_> {
    pub fn run_until(
        &self,
        objective: &Objective,
        budget: usize,
        stop: impl FnMut(&[Trial]) -> bool,
    ) -> Result<Vec<Trial>> {
        self.space.sites.iter().try_for_each(|s| {
            if s.site.layer >= self.model.dims.layers {
                Err(Error::Config(format!(
                    "site {} is outside the model",
                    s.site
                )))
            } else {
                Ok(())
            }
        })?;
        let eval = |c: &QuantConfig| measure(self.model, self.data, objective, c);
        search_with(
            self.space,
            objective,
            budget,
            self.seed,
            &self.params,
            eval,
            stop,
        )
    }

    pub fn run(&self, objective: &Objective, budget: usize) -> Result<Vec<Trial>> {
        self.run_until(objective, budget, |_| false)
    }
}

/// `budget` trials on `model`, fully determined by `seed`.
pub fn run_search(
    model: &ToyModel,
    data: &Dataset,
    space: &SearchSpace,
    objective: &Objective,
    budget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    ModelSearch {
        model,
        data,
        space,
        params: SearchParams::default(),
        seed,
    }
    .run(objective, budget)
}

/// Best trial so far (highest score, earliest on ties).
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .fold(None, |best: Option<&Trial>, t| match best {
            Some(b) if b.score >= t.score => Some(b),
            _ => Some(t),
        })
}

/// Index after which the best score stayed unchanged for `patience` trials.
pub fn converged_at(trials: &[Trial], patience: usize) -> Option<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.score > best {
            best = t.score;
            since = i;
        }
        if i - since >= patience {
            return Some(i);
        }
    }
    None
}

pub const DEFAULT_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    pub acc_c: f64,
    pub mem_c: f64,
    /// Trials run before the best score stagnated (or the budget ran out).
    pub trials: usize,
    pub converged: bool,
}

pub fn alpha_from(acc_c: f64, mem_c: f64) -> f64 {
    acc_c / mem_c
}

/// Runs the search with α = 1 until the best score is unchanged for
/// `patience` trials and returns `acc_c / mem_c` of that best trial.
pub fn calibrate_alpha(
    runner: &ModelSearch<'_>,
    budget: usize,
    patience: usize,
) -> Result<Calibration> {
    let trials = runner.run_until(&Objective::new(1.0), budget, |t| {
        converged_at(t, patience).is_some()
    })?;
    calibration_from(&trials, patience)
}

/// α from a finished α = 1 trial list.
pub fn calibration_from(trials: &[Trial], patience: usize) -> Result<Calibration> {
    let cut = converged_at(trials, patience);
    let upto = cut.map_or(trials.len(), |i| i + 1);
    let best = best_trial(&trials[..upto])
        .ok_or_else(|| Error::Config("calibration needs at least one trial".into()))?;
    Ok(Calibration {
        alpha: alpha_from(best.acc, best.mem),
        acc_c: best.acc,
        mem_c: best.mem,
        trials: upto,
        converged: cut.is_some(),
    })
}

pub fn filter_trials(trials: &[Trial], acc_floor: f64, mem_floor: f64) -> Vec<Trial> {
    trials
        .iter()
        .filter(|t| t.acc >= acc_floor && t.mem >= mem_floor)
        .cloned()
        .collect()
}

/// Histogram bucket labels: widths up to 4 share the first bucket.
pub const WIDTH_BUCKETS: [&str; 5] = ["<=4", "5", "6", "7", "8"];

fn bucket(width: u32) -> Option<usize> {
    match width {
        0..=4 => Some(0),
        5..=8 => Some(width as usize - 4),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthDistribution {
    pub site: TensorSite,
    /// Trials counted; 0 marks an empty dimension.
    pub count: usize,
    pub fractions: [f64; 5],
    pub mean_width: Option<f64>,
}

/// Per-site distribution of element widths over `trials`.
pub fn bitwidth_histogram(trials: &[Trial], space: &SearchSpace) -> Result<Vec<WidthDistribution>> {
    space
        .sites
        .iter()
        .map(|s| {
            let mut counts = [0usize; 5];
            let mut sum = 0u64;
            for t in trials {
                let w = t.config.get(s.site)?.element_bits();
                let b = bucket(w).ok_or_else(|| {
                    Error::Config(format!(
                        "trial {}: width {w} at {} has no bucket",
                        t.index, s.site
                    ))
                })?;
                counts[b] += 1;
                sum += u64::from(w);
            }
            let n = trials.len();
            Ok(WidthDistribution {
                site: s.site,
                count: n,
                fractions: counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }),
                mean_width: (n > 0).then(|| sum as f64 / n as f64),
            })
        })
        .collect()
}
