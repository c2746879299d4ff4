//! Hyperparameter search: uniform random sampling and a tree-structured
//! Parzen estimator.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Domain {
    /// Sampled uniformly in log space.
    LogUniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    Categorical { choices: Vec<String> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Domain::LogUniform { low, high } if !(*low > 0.0 && low < high && high.is_finite()) => {
                Err(Error::config(format!("{name}: log-uniform needs 0 < low < high")))
            }
            Domain::Uniform { low, high } if !(low < high && low.is_finite() && high.is_finite()) => {
                Err(Error::config(format!("{name}: uniform needs low < high")))
            }
            Domain::Categorical { choices } if choices.is_empty() => {
                Err(Error::config(format!("{name}: empty choice set")))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, value: &Value) -> bool {
        match (self, value) {
            (Domain::LogUniform { low, high } | Domain::Uniform { low, high }, Value::Real(v)) => {
                (*low..=*high).contains(v)
            }
            (Domain::Categorical { choices }, Value::Category(c)) => choices.contains(c),
            _ => false,
        }
    }

    /// Real domains as an interval in the space the search works in.
    fn internal_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Domain::LogUniform { low, high } => Some((low.ln(), high.ln())),
            Domain::Uniform { low, high } => Some((*low, *high)),
            Domain::Categorical { .. } => None,
        }
    }

    fn to_internal(&self, v: f64) -> f64 {
        match self {
            Domain::LogUniform { .. } => v.ln(),
            _ => v,
        }
    }

    fn from_internal(&self, u: f64) -> Value {
        match self {
            Domain::LogUniform { low, high } => Value::Real(u.exp().clamp(*low, *high)),
            Domain::Uniform { low, high } => Value::Real(u.clamp(*low, *high)),
            Domain::Categorical { choices } => Value::Category(choices[u as usize].clone()),
        }
    }

    fn sample(&self, rng: &mut Stream) -> Value {
        match self {
            Domain::Categorical { choices } => Value::Category(choices[rng.random_range(0..choices.len())].clone()),
            _ => {
                let (lo, hi) = self.internal_bounds().expect("real domain");
                self.from_internal(lo + (hi - lo) * rng.random::<f64>())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Category(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v:e}"),
            Value::Category(c) => f.write_str(c),
        }
    }
}

pub type TrialConfig = BTreeMap<String, Value>;

pub fn real(config: &TrialConfig, name: &str) -> Result<f64> {
    match config.get(name) {
        Some(Value::Real(v)) => Ok(*v),
        _ => Err(Error::config(format!("trial config has no real value {name:?}"))),
    }
}

pub fn category<'a>(config: &'a TrialConfig, name: &str) -> Result<&'a str> {
    match config.get(name) {
        Some(Value::Category(c)) => Ok(c),
        _ => Err(Error::config(format!("trial config has no choice {name:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<(String, Domain)>,
}

impl SearchSpace {
    pub fn finetune() -> Self {
        SearchSpace {
            dims: vec![
                ("learning_rate".into(), Domain::LogUniform { low: 1e-6, high: 5e-5 }),
                ("weight_decay".into(), Domain::Uniform { low: 0.0, high: 1e-3 }),
                ("batch_size".into(), Domain::Categorical { choices: vec!["64".into(), "128".into(), "256".into()] }),
                ("augmentation".into(), Domain::Categorical { choices: vec!["simple".into(), "harsh".into()] }),
            ],
        }
    }

    pub fn pretrain() -> Self {
        SearchSpace {
            dims: vec![
                ("learning_rate".into(), Domain::LogUniform { low: 1e-6, high: 1e-5 }),
                ("weight_decay".into(), Domain::Uniform { low: 0.0, high: 1e-1 }),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("search space has no dimensions"));
        }
        for (name, d) in &self.dims {
            d.validate(name)?;
        }
        Ok(())
    }

    pub fn contains(&self, config: &TrialConfig) -> bool {
        config.len() == self.dims.len()
            && self.dims.iter().all(|(name, d)| config.get(name).is_some_and(|v| d.contains(v)))
    }

    pub fn sample(&self, rng: &mut Stream) -> TrialConfig {
        self.dims.iter().map(|(name, d)| (name.clone(), d.sample(rng))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

/// Objective value of one trial plus the per-fold values it summarizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

impl Evaluation {
    /// Score is the mean of the fold values.
    pub fn from_folds(fold_scores: Vec<f64>) -> Result<Self> {
        if fold_scores.is_empty() {
            return Err(Error::config("evaluation without folds"));
        }
        let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        Ok(Evaluation { score, fold_scores })
    }

    pub fn single(score: f64) -> Self {
        Evaluation { score, fold_scores: vec![score] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialSource {
    Random,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub source: TrialSource,
    pub config: TrialConfig,
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub direction: Direction,
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    /// One row per trial; fold values are comma-separated in one column.
    pub fn to_tsv(&self) -> String {
        let names: Vec<&str> = self
            .trials
            .first()
            .map(|t| t.config.keys().map(String::as_str).collect())
            .unwrap_or_default();
        let mut s = format!("trial\tsource\t{}\tscore\tfold_scores\n", names.join("\t"));
        for t in &self.trials {
            let values: Vec<String> = names.iter().map(|n| t.config[*n].to_string()).collect();
            let folds: Vec<String> = t.fold_scores.iter().map(|v| format!("{v:.17e}")).collect();
            let source = match t.source {
                TrialSource::Random => "random",
                TrialSource::Model => "model",
            };
            let _ = writeln!(
                s,
                "{}\t{source}\t{}\t{:.17e}\t{}",
                t.index,
                values.join("\t"),
                t.score,
                folds.join(",")
            );
        }
        s
    }
}

fn finish(direction: Direction, trials: Vec<Trial>) -> Result<SearchResult> {
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if !t.score.is_finite() {
            return Err(Error::numeric("search", format!("trial {i} scored {}", t.score)));
        }
        if direction.better(t.score, trials[best].score) {
            best = i;
        }
    }
    Ok(SearchResult { direction, best, trials })
}

fn run_trial<F>(index: usize, source: TrialSource, config: TrialConfig, objective: &F) -> Result<Trial>
where
    F: Fn(&TrialConfig, usize) -> Result<Evaluation> + Sync,
{
    let eval = objective(&config, index)?;
    if !eval.score.is_finite() {
        return Err(Error::numeric("search", format!("trial {index} scored {}", eval.score)));
    }
    Ok(Trial {
        index,
        source,
        config,
        score: eval.score,
        fold_scores: eval.fold_scores,
    })
}

/// `n_runs` independent uniform draws, evaluated in parallel. The objective
/// receives the trial index so it can derive its own seed.
pub fn random_search<F>(
    space: &SearchSpace,
    n_runs: usize,
    seed: u64,
    direction: Direction,
    objective: F,
) -> Result<SearchResult>
where
    F: Fn(&TrialConfig, usize) -> Result<Evaluation> + Sync,
{
    space.validate()?;
    if n_runs == 0 {
        return Err(Error::config("random search needs at least one run"));
    }
    let configs: Vec<TrialConfig> = (0..n_runs)
        .map(|i| space.sample(&mut rng::stream(seed, "random_search", i as u64)))
        .collect();
    let trials = configs
        .into_par_iter()
        .enumerate()
        .map(|(i, c)| run_trial(i, TrialSource::Random, c, &objective))
        .collect::<Result<Vec<_>>>()?;
    finish(direction, trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeSettings {
    pub n_initial: usize,
    /// Share of trials treated as good.
    pub gamma: f64,
    pub n_candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        TpeSettings {
            n_initial: 10,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Mixture of Gaussians truncated to `[lo, hi]`, one per observation plus a
/// broad prior component at the interval centre.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    masses: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn fit(observations: &[f64], lo: f64, hi: f64) -> Self {
        let range = hi - lo;
        let mut mus: Vec<f64> = observations.to_vec();
        mus.push(0.5 * (lo + hi));
        let mut order: Vec<usize> = (0..mus.len()).collect();
        order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]));
        let min_sigma = range / (100.0f64).min(1.0 + mus.len() as f64);
        let mut sigmas = vec![range; mus.len()];
        for (rank, &i) in order.iter().enumerate() {
            if i == mus.len() - 1 {
                continue;
            }
            let left = if rank == 0 { mus[i] - lo } else { mus[i] - mus[order[rank - 1]] };
            let right = if rank + 1 == order.len() { hi - mus[i] } else { mus[order[rank + 1]] - mus[i] };
            sigmas[i] = left.max(right).clamp(min_sigma, range);
        }
        let masses = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| (normal_cdf((hi - m) / s) - normal_cdf((lo - m) / s)).max(1e-300))
            .collect();
        Parzen { mus, sigmas, masses, lo, hi }
    }

    fn log_density(&self, x: f64) -> f64 {
        let k = self.mus.len() as f64;
        let mut total = 0.0;
        for ((m, s), z) in self.mus.iter().zip(&self.sigmas).zip(&self.masses) {
            let t = (x - m) / s;
            total += (-0.5 * t * t).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * z);
        }
        (total / k).max(1e-300).ln()
    }

    fn sample(&self, rng: &mut Stream) -> f64 {
        let i = rng.random_range(0..self.mus.len());
        let normal = rand_distr::Normal::new(self.mus[i], self.sigmas[i]).expect("positive sigma");
        for _ in 0..64 {
            let x = rand_distr::Distribution::sample(&normal, rng);
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        self.mus[i].clamp(self.lo, self.hi)
    }
}

/// Smoothed category frequencies.
fn categorical_probs(observed: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![1.0; k];
    for &c in observed {
        counts[c] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

fn propose(space: &SearchSpace, trials: &[Trial], direction: Direction, settings: &TpeSettings, rng: &mut Stream) -> TrialConfig {
    let mut ranked: Vec<&Trial> = trials.iter().collect();
    ranked.sort_by(|a, b| match direction {
        Direction::Minimize => a.score.total_cmp(&b.score),
        Direction::Maximize => b.score.total_cmp(&a.score),
    });
    let n_good = ((settings.gamma * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len() - 1);
    let (good, bad) = ranked.split_at(n_good);

    // Per-dimension samplers and scorers for the good (l) and bad (g) sets.
    enum Model {
        Real(Parzen, Parzen),
        Cat(Vec<f64>, Vec<f64>),
    }
    let models: Vec<Model> = space
        .dims
        .iter()
        .map(|(name, d)| match d {
            Domain::Categorical { choices } => {
                let idx = |set: &[&Trial]| -> Vec<usize> {
                    set.iter()
                        .filter_map(|t| match &t.config[name] {
                            Value::Category(c) => choices.iter().position(|x| x == c),
                            Value::Real(_) => None,
                        })
                        .collect()
                };
                Model::Cat(categorical_probs(&idx(good), choices.len()), categorical_probs(&idx(bad), choices.len()))
            }
            _ => {
                let (lo, hi) = d.internal_bounds().expect("real domain");
                let obs = |set: &[&Trial]| -> Vec<f64> {
                    set.iter()
                        .filter_map(|t| match &t.config[name] {
                            Value::Real(v) => Some(d.to_internal(*v)),
                            Value::Category(_) => None,
                        })
                        .collect()
                };
                Model::Real(Parzen::fit(&obs(good), lo, hi), Parzen::fit(&obs(bad), lo, hi))
            }
        })
        .collect();

    let mut best: Option<(f64, TrialConfig)> = None;
    for _ in 0..settings.n_candidates.max(1) {
        let mut config = TrialConfig::new();
        let mut score = 0.0;
        for ((name, d), m) in space.dims.iter().zip(&models) {
            match m {
                Model::Real(l, g) => {
                    let u = l.sample(rng);
                    score += l.log_density(u) - g.log_density(u);
                    config.insert(name.clone(), d.from_internal(u));
                }
                Model::Cat(l, g) => {
                    let r: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = l.len() - 1;
                    for (i, p) in l.iter().enumerate() {
                        acc += p;
                        if r < acc {
                            pick = i;
                            break;
                        }
                    }
                    score += l[pick].ln() - g[pick].ln();
                    config.insert(name.clone(), d.from_internal(pick as f64));
                }
            }
        }
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, config));
        }
    }
    best.expect("at least one candidate").1
}

/// Sequential model-based search: `n_initial` uniform trials (evaluated in
/// parallel), then one density-ratio proposal per trial.
pub fn bayes_search<F>(
    space: &SearchSpace,
    n_trials: usize,
    settings: &TpeSettings,
    seed: u64,
    direction: Direction,
    objective: F,
) -> Result<SearchResult>
where
    F: Fn(&TrialConfig, usize) -> Result<Evaluation> + Sync,
{
    space.validate()?;
    if settings.n_initial == 0 || n_trials < settings.n_initial {
        return Err(Error::config(format!(
            "need 1 <= n_initial ({}) <= n_trials ({n_trials})",
            settings.n_initial
        )));
    }
    if !(settings.gamma > 0.0 && settings.gamma < 1.0) {
        return Err(Error::config("gamma must be in (0,1)"));
    }
    let initial: Vec<TrialConfig> = (0..settings.n_initial)
        .map(|i| space.sample(&mut rng::stream(seed, "tpe_initial", i as u64)))
        .collect();
    let mut trials = initial
        .into_par_iter()
        .enumerate()
        .map(|(i, c)| run_trial(i, TrialSource::Random, c, &objective))
        .collect::<Result<Vec<_>>>()?;
    for i in settings.n_initial..n_trials {
        let config = if trials.len() < 2 {
            space.sample(&mut rng::stream(seed, "tpe_initial", i as u64))
        } else {
            propose(space, &trials, direction, settings, &mut rng::stream(seed, "tpe", i as u64))
        };
        trials.push(run_trial(i, TrialSource::Model, config, &objective)?);
    }
    finish(direction, trials)
}
