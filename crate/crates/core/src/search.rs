//! Bayesian search over restoration fractions and the interpolation
//! coefficient.
//!
//! The first `init_points` proposals come from a seeded Latin-hypercube
//! design. After that a Gaussian-process surrogate (squared-exponential
//! kernel, length-scale 0.2 on the unit cube, noise variance 1e-6, prior mean
//! equal to the mean observed objective) is fit to the finite observations,
//! and the proposal is the Expected-Improvement maximizer over 1024 seeded
//! uniform candidates.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::checkpoint::{self, Checkpoint, DtypePolicy};
use crate::evaluator::{EvalScores, Evaluator};
use crate::merger;
use crate::planner::{self, Policy, PolicyName, ScoredRow};
use crate::rng;

pub const LENGTH_SCALE: f64 = 0.2;
pub const NOISE_VARIANCE: f64 = 1e-6;
pub const CANDIDATES: usize = 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("lambda = {0} is outside [0, 1]")]
    InvalidLambda(f64),
    #[error("all {0} trials failed; last error: {1}")]
    AllTrialsFailed(usize, String),
    #[error("cannot prepare trial workspace: {0}")]
    Workspace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    FracMlp,
    FracAttn,
    T,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dim::FracMlp => "frac_mlp",
            Dim::FracAttn => "frac_attn",
            Dim::T => "t",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimRange {
    pub name: Dim,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<DimRange>,
    pub budget: usize,
    pub init_points: usize,
    pub seed: u64,
}

impl SearchSpace {
    /// All three dimensions over `[0, 1]`, budget 20, 8 initial points.
    pub fn unit(seed: u64) -> Self {
        Self {
            dims: [Dim::FracMlp, Dim::FracAttn, Dim::T]
                .into_iter()
                .map(|name| DimRange { name, lo: 0.0, hi: 1.0 })
                .collect(),
            budget: 20,
            init_points: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidSpace(m));
        if self.dims.is_empty() {
            return bad("no dimensions".into());
        }
        if self.budget == 0 || self.init_points == 0 {
            return bad("budget and init_points must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.dims {
            if !seen.insert(d.name) {
                return bad(format!("dimension {} listed twice", d.name));
            }
            if !(0.0 <= d.lo && d.lo < d.hi && d.hi <= 1.0) {
                return bad(format!("{}: need 0 <= lo < hi <= 1, got [{}, {}]", d.name, d.lo, d.hi));
            }
        }
        Ok(())
    }

    fn to_config(&self, unit: &[f64]) -> BTreeMap<Dim, f64> {
        self.dims
            .iter()
            .zip(unit)
            .map(|(d, &u)| (d.name, d.lo + u * (d.hi - d.lo)))
            .collect()
    }

    fn to_unit(&self, config: &BTreeMap<Dim, f64>) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| (config[&d.name] - d.lo) / (d.hi - d.lo))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub index: usize,
    pub config: BTreeMap<Dim, f64>,
    pub domain_score: f64,
    pub general_score: f64,
    /// `λ·general + (1 − λ)·domain`; `-inf` for failed trials.
    pub objective: f64,
    pub plan_digest: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl SearchTrial {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: SearchTrial,
    pub history: Vec<SearchTrial>,
}

pub fn scalarize(scores: &EvalScores, lambda: f64) -> f64 {
    lambda * scores.general_score + (1.0 - lambda) * scores.domain_score
}

pub fn expected_improvement(mean: f64, stdev: f64, best_so_far: f64) -> f64 {
    let gain = mean - best_so_far;
    if stdev <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / stdev;
    let n = Normal::standard();
    (gain * n.cdf(z) + stdev * n.pdf(z)).max(0.0)
}

fn sq_exp(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// Gaussian-process posterior over unit-cube inputs.
///
/// Objectives are centered on their mean and scaled by their standard
/// deviation, so the kernel amplitude is the observed variance.
pub struct Surrogate {
    inputs: Vec<Vec<f64>>,
    weights: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    mean: f64,
    scale: f64,
}

impl Surrogate {
    /// `None` when fewer than two observations or all objectives are equal.
    pub fn fit(inputs: &[Vec<f64>], values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n < 2 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        if var.is_nan() || var <= 0.0 {
            return None;
        }
        let scale = var.sqrt();
        let y = DVector::from_iterator(n, values.iter().map(|v| (v - mean) / scale));
        let mut jitter = NOISE_VARIANCE;
        let chol = loop {
            let k = DMatrix::from_fn(n, n, |i, j| {
                sq_exp(&inputs[i], &inputs[j]) + if i == j { jitter } else { 0.0 }
            });
            if let Some(c) = k.cholesky() {
                break c;
            }
            // Duplicate inputs make K singular at the nominal noise level.
            jitter *= 10.0;
            if jitter > 1.0 {
                return None;
            }
        };
        let weights = chol.solve(&y);
        Some(Self {
            inputs: inputs.to_vec(),
            weights,
            chol,
            mean,
            scale,
        })
    }

    /// Posterior mean and standard deviation in objective units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|p| sq_exp(p, x)));
        let mu = k.dot(&self.weights);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }
}

/// Seeded Latin-hypercube design on the unit cube: `n` points, one per
/// stratum in every dimension.
pub fn latin_hypercube(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "search/init");
    let mut points = vec![vec![0.0; dims]; n];
    for d in 0..dims {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut r);
        for (p, &s) in points.iter_mut().zip(&strata) {
            p[d] = (s as f64 + r.random::<f64>()) / n as f64;
        }
    }
    points
}

fn random_point(dims: usize, seed: u64, label: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, label);
    (0..dims).map(|_| r.random::<f64>()).collect()
}

/// Next configuration to evaluate given the trials so far.
pub fn propose_next(history: &[SearchTrial], space: &SearchSpace) -> BTreeMap<Dim, f64> {
    let dims = space.dims.len();
    let n = history.len();
    if n < space.init_points {
        return space.to_config(&latin_hypercube(space.init_points, dims, space.seed)[n]);
    }
    let (inputs, values): (Vec<Vec<f64>>, Vec<f64>) = history
        .iter()
        .filter(|t| t.objective.is_finite())
        .map(|t| (space.to_unit(&t.config), t.objective))
        .unzip();
    let Some(gp) = Surrogate::fit(&inputs, &values) else {
        return space.to_config(&random_point(dims, space.seed, &format!("search/fallback/{n}")));
    };
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut r = rng::stream(space.seed, &format!("search/candidates/{n}"));
    let mut arg = Vec::new();
    let mut top = f64::NEG_INFINITY;
    for _ in 0..CANDIDATES {
        let x: Vec<f64> = (0..dims).map(|_| r.random::<f64>()).collect();
        let (mu, sd) = gp.predict(&x);
        let ei = expected_improvement(mu, sd, best);
        if ei > top {
            top = ei;
            arg = x;
        }
    }
    space.to_config(&arg)
}

/// Outcome of one trial evaluation: scores plus the plan digest it used.
pub type TrialResult = Result<(EvalScores, String), String>;

/// Sequential search loop over an arbitrary trial function.
pub fn optimize(
    space: &SearchSpace,
    lambda: f64,
    mut run_trial: impl FnMut(&BTreeMap<Dim, f64>) -> TrialResult,
) -> Result<SearchOutcome, SearchError> {
    space.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SearchError::InvalidLambda(lambda));
    }
    let mut history: Vec<SearchTrial> = Vec::with_capacity(space.budget);
    for index in 0..space.budget {
        let config = propose_next(&history, space);
        let trial = match run_trial(&config) {
            Ok((scores, plan_digest)) => SearchTrial {
                index,
                config,
                domain_score: scores.domain_score,
                general_score: scores.general_score,
                objective: scalarize(&scores, lambda),
                plan_digest,
                error: None,
            },
            Err(error) => SearchTrial {
                index,
                config,
                domain_score: f64::NAN,
                general_score: f64::NAN,
                objective: f64::NEG_INFINITY,
                plan_digest: String::new(),
                error: Some(error),
            },
        };
        history.push(trial);
    }
    let best = history
        .iter()
        .filter(|t| !t.failed())
        .fold(None::<&SearchTrial>, |acc, t| match acc {
            Some(b) if b.objective >= t.objective => Some(b),
            _ => Some(t),
        })
        .cloned();
    match best {
        Some(best) => Ok(SearchOutcome { best, history }),
        None => Err(SearchError::AllTrialsFailed(
            history.len(),
            history
                .last()
                .and_then(|t| t.error.clone())
                .unwrap_or_default(),
        )),
    }
}

/// Policy for a search configuration; dimensions absent from the space keep
/// the values of `template`.
pub fn policy_for(template: &Policy, config: &BTreeMap<Dim, f64>) -> Policy {
    Policy {
        name: PolicyName::Custom,
        frac_mlp: config.get(&Dim::FracMlp).copied().unwrap_or(template.frac_mlp),
        frac_attn: config.get(&Dim::FracAttn).copied().unwrap_or(template.frac_attn),
        t: config.get(&Dim::T).copied().unwrap_or(template.t),
        ..template.clone()
    }
}

/// Plan, merge, write, and score one configuration.
pub fn evaluate_policy(
    base: &Checkpoint,
    adapted: &Checkpoint,
    scores: &[ScoredRow],
    policy: &Policy,
    evaluator: &dyn Evaluator,
    workdir: &std::path::Path,
) -> TrialResult {
    let plan = planner::build_plan(scores, policy).map_err(|e| e.to_string())?;
    let merged = merger::apply_plan(base, adapted, &plan).map_err(|e| e.to_string())?;
    let path = workdir.join("trial.safetensors");
    let path_arg = if evaluator.needs_file() {
        checkpoint::save_checkpoint(&merged, &path, DtypePolicy::ForceF32)
            .map_err(|e| e.to_string())?;
        Some(path.as_path())
    } else {
        None
    };
    let result = evaluator
        .evaluate(&merged, path_arg)
        .map_err(|e| e.to_string())?;
    Ok((result, plan.config_digest))
}

/// Run `space.budget` trials against `evaluator` and return the best by
/// scalarized objective (ties go to the earliest trial).
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    base: &Checkpoint,
    adapted: &Checkpoint,
    scores: &[ScoredRow],
    template: &Policy,
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    lambda: f64,
) -> Result<SearchOutcome, SearchError> {
    let workdir = tempfile::tempdir().map_err(|e| SearchError::Workspace(e.to_string()))?;
    optimize(space, lambda, |config| {
        let policy = policy_for(template, config);
        evaluate_policy(base, adapted, scores, &policy, evaluator, workdir.path())
    })
}
