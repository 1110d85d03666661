//! Prior and proposal distributions used while growing particle trees.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::SplitRule;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("beta must be >= 0, got {0}")]
    Beta(f64),
    #[error("split-variable weight {index} must be positive and finite, got {value}")]
    SplitWeight { index: usize, value: f64 },
    #[error("at least one covariate is required")]
    NoCovariates,
    #[error("number of trees must be >= 1")]
    NoTrees,
    #[error("response has zero variance; cannot derive a leaf proposal scale")]
    ZeroVariance,
    #[error("response is empty")]
    EmptyResponse,
}

/// Probability that a node at depth `d` is non-terminal: `alpha * (1 + d)^-beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DepthPrior {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

impl DepthPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ConfigError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ConfigError::Alpha(alpha));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(ConfigError::Beta(beta));
        }
        Ok(Self { alpha, beta })
    }

    pub fn p_nonterminal(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Free-function form of [`DepthPrior::p_nonterminal`].
pub fn p_nonterminal(depth: usize, prior: &DepthPrior) -> f64 {
    prior.p_nonterminal(depth)
}

/// Adaptive categorical weights over covariates used to pick split variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitVarWeights {
    weights: Vec<f64>,
    total: f64,
    frozen: bool,
}

impl SplitVarWeights {
    pub fn uniform(p: usize) -> Result<Self, ConfigError> {
        Self::from_prior(vec![1.0; p])
    }

    /// Starts from user-supplied prior weights; these are still adapted during tuning.
    pub fn from_prior(weights: Vec<f64>) -> Result<Self, ConfigError> {
        if weights.is_empty() {
            return Err(ConfigError::NoCovariates);
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0 && w.is_finite()))
        {
            return Err(ConfigError::SplitWeight { index, value });
        }
        let total = weights.iter().sum();
        Ok(Self {
            weights,
            total,
            frozen: false,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total;
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        self.weights.len() - 1
    }

    /// Adds split counts to the weights. No-op once frozen.
    pub fn update(&mut self, counts: &[usize]) {
        if self.frozen {
            return;
        }
        for (w, &c) in self.weights.iter_mut().zip(counts) {
            *w += c as f64;
        }
        self.total = self.weights.iter().sum();
    }
}

/// Rule family used for one covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Continuous,
    OneHot,
    Subset,
}

/// Draws a split rule from the values routed to a node.
///
/// Returns `None` when fewer than two distinct values are present; the leaf
/// is then unsplittable. Any returned rule sends at least one of `values`
/// to each side.
pub fn sample_split_value<R: Rng + ?Sized>(kind: SplitKind, values: &[f64], rng: &mut R) -> Option<SplitRule> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return None;
    }
    match kind {
        SplitKind::Continuous => {
            // the maximum would leave the right side empty under <= routing
            let i = rng.random_range(0..distinct.len() - 1);
            Some(SplitRule::Continuous(distinct[i]))
        }
        SplitKind::OneHot => {
            let i = rng.random_range(0..distinct.len());
            Some(SplitRule::OneHot(distinct[i]))
        }
        SplitKind::Subset => {
            // uniform over nonempty proper subsets by rejection on fair coin flips
            loop {
                let chosen: Vec<f64> = distinct
                    .iter()
                    .copied()
                    .filter(|_| rng.random::<bool>())
                    .collect();
                if !chosen.is_empty() && chosen.len() < distinct.len() {
                    return Some(SplitRule::Subset(chosen));
                }
            }
        }
    }
}

/// Welford running mean/variance accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Sample variance; `None` with fewer than two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }
}

/// Leaf-value proposal scale, one per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafScale {
    eps: Vec<f64>,
    welford: Vec<Welford>,
}

impl LeafScale {
    pub fn new(eps: Vec<f64>) -> Self {
        assert!(eps.iter().all(|e| *e > 0.0), "leaf scale must be positive");
        let welford = vec![Welford::default(); eps.len()];
        Self { eps, welford }
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn accumulator(&self, dim: usize) -> &Welford {
        &self.welford[dim]
    }

    /// Feeds values into the accumulator without touching `eps`.
    pub fn push_values(&mut self, dim: usize, values: impl IntoIterator<Item = f64>) {
        let acc = &mut self.welford[dim];
        for v in values {
            acc.push(v);
        }
    }

    /// Feeds tree predictions for one output dimension into the running variance.
    ///
    /// `eps` becomes the running standard deviation once at least two values
    /// have been seen and the variance is positive; otherwise it is kept.
    pub fn update_running_variance(&mut self, dim: usize, values: impl IntoIterator<Item = f64>) {
        self.push_values(dim, values);
        if let Some(var) = self.welford[dim].variance() {
            if var > 0.0 && var.is_finite() {
                self.eps[dim] = var.sqrt();
            }
        }
    }
}

/// Draws a leaf value `N(mu_pred, eps^2)` independently per output dimension.
pub fn leaf_value_proposal<R: Rng + ?Sized>(mu_pred: &[f64], scale: &LeafScale, rng: &mut R) -> Vec<f64> {
    mu_pred
        .iter()
        .zip(&scale.eps)
        .map(|(mu, eps)| {
            let z: f64 = StandardNormal.sample(rng);
            mu + eps * z
        })
        .collect()
}

/// Initial leaf scale: `3 / sqrt(m)` for binary responses, `std(Y_init) / sqrt(m)` otherwise.
///
/// `y_init` holds one column per output dimension.
pub fn init_eps(y_init: &[Vec<f64>], m: usize, binary: bool) -> Result<LeafScale, ConfigError> {
    if m == 0 {
        return Err(ConfigError::NoTrees);
    }
    if y_init.is_empty() || y_init.iter().any(Vec::is_empty) {
        return Err(ConfigError::EmptyResponse);
    }
    let root_m = (m as f64).sqrt();
    let eps = if binary {
        vec![3.0 / root_m; y_init.len()]
    } else {
        y_init
            .iter()
            .map(|col| {
                let sd = population_std(col);
                if sd > 0.0 && sd.is_finite() {
                    Ok(sd / root_m)
                } else {
                    Err(ConfigError::ZeroVariance)
                }
            })
            .collect::<Result<_, _>>()?
    };
    Ok(LeafScale::new(eps))
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}
