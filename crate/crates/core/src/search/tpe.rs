//! Tree-structured Parzen Estimator over independent categorical
//! dimensions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeParams {
    /// Fraction of the history treated as good.
    pub gamma: f64,
    /// Trials drawn uniformly before the model is used.
    pub n_startup: usize,
    pub n_candidates: usize,
    /// Pseudo-count added to every category.
    pub prior_weight: f64,
}

impl Default for TpeParams {
    fn default() -> Self {
        TpeParams {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            prior_weight: 1.0,
        }
    }
}

impl TpeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be positive".into()));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::Config("prior_weight must be positive".into()));
        }
        Ok(())
    }
}

/// A scored point: choice index per dimension, score, and trial index.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub choices: &'a [usize],
    pub score: f64,
    pub index: usize,
}

/// Number of observations that form the good set.
pub fn good_count(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Good and bad observations: sorted by score, higher first, ties broken by
/// lower trial index.
pub fn split<'a>(
    history: &[Observation<'a>],
    gamma: f64,
) -> (Vec<Observation<'a>>, Vec<Observation<'a>>) {
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    let bad = sorted.split_off(good_count(history.len(), gamma));
    (sorted, bad)
}

/// Smoothed category frequencies of dimension `d`.
pub fn frequencies(set: &[Observation<'_>], d: usize, n: usize, prior: f64) -> Vec<f64> {
    let mut counts = vec![prior; n];
    for o in set {
        counts[o.choices[d]] += 1.0;
    }
    let total = set.len() as f64 + prior * n as f64;
    counts.iter().map(|c| c / total).collect()
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Next point to evaluate given `history`.
pub fn suggest(
    history: &[Observation<'_>],
    dims: &[usize],
    params: &TpeParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    params.validate()?;
    if let Some(d) = dims.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("search dimension {d} is empty")));
    }
    if history.len() < params.n_startup.max(1) {
        return Ok(dims.iter().map(|&n| rng.random_range(0..n)).collect());
    }
    if let Some(o) = history.iter().find(|o| o.choices.len() != dims.len()) {
        return Err(Error::Config(format!(
            "trial {} has {} choices, the space has {}",
            o.index,
            o.choices.len(),
            dims.len()
        )));
    }
    let (good, bad) = split(history, params.gamma);
    let mut p_good = Vec::with_capacity(dims.len());
    let mut log_ratio = Vec::with_capacity(dims.len());
    for (d, &n) in dims.iter().enumerate() {
        let g = frequencies(&good, d, n, params.prior_weight);
        let b = frequencies(&bad, d, n, params.prior_weight);
        log_ratio.push(
            g.iter()
                .zip(&b)
                .map(|(g, b)| g.ln() - b.ln())
                .collect::<Vec<_>>(),
        );
        p_good.push(g);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..params.n_candidates {
        let cand: Vec<usize> = p_good.iter().map(|p| sample(p, rng)).collect();
        let score: f64 = cand.iter().enumerate().map(|(d, &c)| log_ratio[d][c]).sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    Ok(best.expect("at least one candidate").1)
}
