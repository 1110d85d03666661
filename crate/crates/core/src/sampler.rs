//! Particle-Gibbs sampler for sum-of-trees models.
//!
//! Each step replaces a batch of trees. For every tree in the batch the
//! current tree competes against `n_particles - 1` trees grown from scratch;
//! the growing particles are weighted by the conditional likelihood of the
//! data given the other trees and systematically resampled after every
//! growth round. A single particle is then drawn with probability
//! proportional to its likelihood and installed in place of the old tree.

use std::collections::VecDeque;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{Likelihood, LikelihoodError, ThetaSampler};
use crate::matrix::Matrix;
use crate::proposals::{init_eps, sample_split_value, ConfigError, DepthPrior, LeafScale, SplitKind, SplitVarWeights};
use crate::trace::{ChainTrace, Trace};
use crate::tree::{Forest, NodeId, Tree};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("all particle weights are -inf")]
    Resample,
    #[error("invalid model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of trees.
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Initial split-variable weights; uniform when absent.
    pub split_prior: Option<Vec<f64>>,
    /// Rule family per covariate; empty means all continuous.
    pub split_rules: Vec<SplitKind>,
    pub n_particles: usize,
    /// Fraction of trees replaced per step during and after tuning.
    pub batch: (f64, f64),
    pub separate_trees: bool,
    /// Initial random-walk scale for the log of each scalar parameter.
    pub theta_step: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            m: 50,
            alpha: 0.95,
            beta: 2.0,
            split_prior: None,
            split_rules: Vec::new(),
            n_particles: 10,
            batch: (0.1, 0.1),
            separate_trees: false,
            theta_step: 0.1,
        }
    }
}

impl SamplerConfig {
    /// Trees replaced per step: `ceil(fraction * m)`, at least one.
    pub fn batch_size(&self, tuning: bool) -> usize {
        let frac = if tuning { self.batch.0 } else { self.batch.1 };
        ((frac * self.m as f64).ceil() as usize).clamp(1, self.m.max(1))
    }
}

/// Everything the sampler needs about one model.
#[derive(Debug, Clone)]
pub struct Model {
    pub x: Matrix,
    pub likelihood: Likelihood,
    /// `n x out_dim` values whose column means initialize the trees and
    /// whose spread sets the initial leaf scale.
    pub y_init: Matrix,
    pub theta_init: Vec<f64>,
    pub config: SamplerConfig,
}

impl Model {
    pub fn new(
        x: Matrix,
        likelihood: Likelihood,
        y_init: Matrix,
        theta_init: Vec<f64>,
        config: SamplerConfig,
    ) -> Result<Self, SamplerError> {
        let n = x.n_rows();
        if n == 0 {
            return Err(SamplerError::Model("no observations".into()));
        }
        if x.n_cols() == 0 {
            return Err(ConfigError::NoCovariates.into());
        }
        if likelihood.n() != n || y_init.n_rows() != n {
            return Err(SamplerError::Model(format!(
                "row mismatch: X has {n}, response {}, init {}",
                likelihood.n(),
                y_init.n_rows()
            )));
        }
        if y_init.n_cols() != likelihood.spec().out_dim {
            return Err(SamplerError::Model("init response width differs from out_dim".into()));
        }
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::Model("covariates must be finite".into()));
        }
        if config.m == 0 {
            return Err(ConfigError::NoTrees.into());
        }
        if config.n_particles == 0 {
            return Err(SamplerError::Model("n_particles must be >= 1".into()));
        }
        for f in [config.batch.0, config.batch.1] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(SamplerError::Model(format!("batch fraction {f} outside (0, 1]")));
            }
        }
        if !config.split_rules.is_empty() && config.split_rules.len() != x.n_cols() {
            return Err(SamplerError::Model("split_rules length differs from the number of covariates".into()));
        }
        if let Some(prior) = &config.split_prior {
            if prior.len() != x.n_cols() {
                return Err(SamplerError::Model("split_prior length differs from the number of covariates".into()));
            }
        }
        if !(config.theta_step > 0.0) {
            return Err(SamplerError::Model("theta_step must be positive".into()));
        }
        DepthPrior::new(config.alpha, config.beta)?;
        likelihood.prepare(&theta_init)?;
        Ok(Self {
            x,
            likelihood,
            y_init,
            theta_init,
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.x.n_rows()
    }

    pub fn p(&self) -> usize {
        self.x.n_cols()
    }

    pub fn out_dim(&self) -> usize {
        self.likelihood.spec().out_dim
    }

    pub fn split_kind(&self, column: usize) -> SplitKind {
        self.config.split_rules.get(column).copied().unwrap_or_default()
    }
}

/// Candidate tree grown during one tree replacement.
#[derive(Debug, Clone)]
pub struct ParticleTree {
    pub tree: Tree,
    /// Leaves still eligible to split, in FIFO order.
    pub expandable: VecDeque<NodeId>,
    /// Training rows routed to each node (empty for internal nodes).
    leaf_rows: Vec<Vec<usize>>,
    /// Row-major `n x out_dim` predictions, zero outside this tree's dimensions.
    pred: Vec<f64>,
    pub log_lik: f64,
    pub log_weight: f64,
}

impl ParticleTree {
    /// Single-leaf particle covering all `n` rows.
    pub fn new_root(value: Vec<f64>, dims: &[usize], n: usize, out_dim: usize) -> Self {
        let mut pred = vec![0.0; n * out_dim];
        for i in 0..n {
            for (k, &d) in dims.iter().enumerate() {
                pred[i * out_dim + d] = value[k];
            }
        }
        Self {
            tree: Tree::new_leaf(value, n),
            expandable: VecDeque::from([0]),
            leaf_rows: vec![(0..n).collect()],
            pred,
            log_lik: f64::NEG_INFINITY,
            log_weight: 0.0,
        }
    }

    pub fn rows(&self, node: NodeId) -> &[usize] {
        &self.leaf_rows[node]
    }

    pub fn predictions(&self) -> &[f64] {
        &self.pred
    }
}

/// Read-only inputs for [`grow_tree_once`].
pub struct GrowContext<'a> {
    pub x: &'a Matrix,
    /// Current sum of trees, `n x out_dim`.
    pub sum_mu: &'a [f64],
    pub out_dim: usize,
    /// Output dimensions carried by the tree being grown.
    pub dims: &'a [usize],
    pub m: usize,
    pub depth_prior: &'a DepthPrior,
    pub split_weights: &'a SplitVarWeights,
    pub split_kinds: &'a [SplitKind],
    pub leaf_scale: &'a LeafScale,
}

/// Pops one expandable leaf and tries to split it.
///
/// The split happens with probability `p_nonterminal(depth)` and only if the
/// sampled variable has at least two distinct values among the routed rows.
/// Otherwise the leaf stays terminal for good. New leaf values are drawn
/// around the mean of `sum_mu / m` over each child's rows.
pub fn grow_tree_once<R: Rng + ?Sized>(p: &mut ParticleTree, ctx: &GrowContext<'_>, rng: &mut R) -> bool {
    let Some(leaf) = p.expandable.pop_front() else {
        return false;
    };
    let depth = p.tree.node(leaf).depth;
    if rng.random::<f64>() >= ctx.depth_prior.p_nonterminal(depth) {
        return false;
    }
    let var = ctx.split_weights.sample(rng);
    let rows = std::mem::take(&mut p.leaf_rows[leaf]);
    let values: Vec<f64> = rows.iter().map(|&r| ctx.x.get(r, var)).collect();
    let kind = ctx.split_kinds.get(var).copied().unwrap_or_default();
    let Some(rule) = sample_split_value(kind, &values, rng) else {
        p.leaf_rows[leaf] = rows;
        return false;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| rule.goes_left(ctx.x.get(r, var)));

    let left_value = draw_leaf(&left_rows, ctx, rng);
    let right_value = draw_leaf(&right_rows, ctx, rng);
    let (left, right) = match p
        .tree
        .grow_at_leaf(leaf, var, rule, left_value, right_value, &left_rows, &right_rows)
    {
        Ok(ids) => ids,
        Err(_) => {
            p.leaf_rows[leaf] = rows;
            return false;
        }
    };
    let d = ctx.out_dim;
    for (node, node_rows) in [(left, &left_rows), (right, &right_rows)] {
        let value = p.tree.leaf_value(node).expect("fresh leaf");
        for &r in node_rows {
            for (k, &dim) in ctx.dims.iter().enumerate() {
                p.pred[r * d + dim] = value[k];
            }
        }
    }
    p.leaf_rows.resize(p.tree.len(), Vec::new());
    p.leaf_rows[left] = left_rows;
    p.leaf_rows[right] = right_rows;
    p.expandable.push_back(left);
    p.expandable.push_back(right);
    true
}

fn draw_leaf<R: Rng + ?Sized>(rows: &[usize], ctx: &GrowContext<'_>, rng: &mut R) -> Vec<f64> {
    let d = ctx.out_dim;
    let n = rows.len() as f64;
    ctx.dims
        .iter()
        .map(|&dim| {
            let mean = rows.iter().map(|&r| ctx.sum_mu[r * d + dim]).sum::<f64>() / n;
            let z: f64 = StandardNormal.sample(rng);
            mean / ctx.m as f64 + ctx.leaf_scale.eps()[dim] * z
        })
        .collect()
}

/// `log(sum(exp(v)))`, `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized probabilities from log weights; `None` if none is finite.
pub fn normalize_log_weights(log_weights: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return None;
    }
    Some(log_weights.iter().map(|w| (w - lse).exp()).collect())
}

/// Systematic resampling from log weights.
pub fn systematic_resample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<Vec<usize>, SamplerError> {
    let weights = normalize_log_weights(log_weights).ok_or(SamplerError::Resample)?;
    let k = weights.len();
    let u = rng.random::<f64>() / k as f64;
    Ok(systematic_resample_with_offset(&weights, u))
}

/// Systematic resampling of normalized `weights` with offset `u` in `[0, 1/k)`:
/// positions `u + i/k` are mapped through the cumulative weights.
pub fn systematic_resample_with_offset(weights: &[f64], u: f64) -> Vec<usize> {
    let k = weights.len();
    let mut out = Vec::with_capacity(k);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..k {
        let pos = u + i as f64 / k as f64;
        while pos >= cumulative && j + 1 < k {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; take the last positive entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Trees sharing one structure and the output dimensions they carry.
#[derive(Debug, Clone)]
struct TreeGroup {
    dims: Vec<usize>,
    trees: Vec<Arc<Tree>>,
    /// Per-tree `n x out_dim` training predictions.
    preds: Vec<Vec<f64>>,
    init_value: Vec<f64>,
    cursor: usize,
}

/// Summary of one [`SamplerState::pg_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub trees_visited: usize,
    /// Trees replaced by a freshly grown particle.
    pub trees_changed: usize,
    /// Mean depth of the installed trees.
    pub mean_depth: f64,
    pub variable_counts: Vec<usize>,
    pub resample_failures: usize,
}

/// Full state of one chain.
#[derive(Debug, Clone)]
pub struct SamplerState {
    groups: Vec<TreeGroup>,
    sum_mu: Vec<f64>,
    split_weights: SplitVarWeights,
    leaf_scale: LeafScale,
    depth_prior: DepthPrior,
    theta: Vec<f64>,
    theta_sampler: ThetaSampler,
    tuning: bool,
    variable_inclusion: Vec<usize>,
    rng: ChaCha8Rng,
    /// Trees installed during tuning; the leaf scale starts following its
    /// running variance only after a full sweep over the ensemble.
    trees_seen: usize,
}

impl SamplerState {
    /// Every tree starts as a single leaf with value `mean(y_init) / m`, so the
    /// sum of trees starts at `mean(y_init)` for every row.
    pub fn init(model: &Model, seed: u64) -> Result<Self, SamplerError> {
        let cfg = &model.config;
        let (n, d, m) = (model.n(), model.out_dim(), cfg.m);
        let columns: Vec<Vec<f64>> = (0..d).map(|k| model.y_init.column(k)).collect();
        let leaf_scale = init_eps(&columns, m, model.likelihood.spec().is_binary())?;
        let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let split_weights = match &cfg.split_prior {
            Some(w) => SplitVarWeights::from_prior(w.clone())?,
            None => SplitVarWeights::uniform(model.p())?,
        };
        let dim_sets: Vec<Vec<usize>> = if cfg.separate_trees {
            (0..d).map(|k| vec![k]).collect()
        } else {
            vec![(0..d).collect()]
        };
        let groups = dim_sets
            .into_iter()
            .map(|dims| {
                let init_value: Vec<f64> = dims.iter().map(|&k| means[k] / m as f64).collect();
                let root = ParticleTree::new_root(init_value.clone(), &dims, n, d);
                TreeGroup {
                    trees: vec![Arc::new(root.tree.clone()); m],
                    preds: vec![root.pred.clone(); m],
                    dims,
                    init_value,
                    cursor: 0,
                }
            })
            .collect::<Vec<_>>();
        let mut sum_mu = vec![0.0; n * d];
        for g in &groups {
            for pred in &g.preds {
                for (s, v) in sum_mu.iter_mut().zip(pred) {
                    *s += v;
                }
            }
        }
        Ok(Self {
            groups,
            sum_mu,
            split_weights,
            leaf_scale,
            depth_prior: DepthPrior::new(cfg.alpha, cfg.beta)?,
            theta: model.theta_init.clone(),
            theta_sampler: ThetaSampler::new(model.theta_init.len(), cfg.theta_step),
            tuning: true,
            variable_inclusion: vec![0; model.p()],
            rng: ChaCha8Rng::seed_from_u64(seed),
            trees_seen: 0,
        })
    }

    pub fn sum_mu(&self) -> &[f64] {
        &self.sum_mu
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn split_weights(&self) -> &SplitVarWeights {
        &self.split_weights
    }

    pub fn leaf_scale(&self) -> &LeafScale {
        &self.leaf_scale
    }

    pub fn is_tuning(&self) -> bool {
        self.tuning
    }

    /// Split counts accumulated from installed trees after tuning.
    pub fn variable_inclusion(&self) -> &[usize] {
        &self.variable_inclusion
    }

    pub fn theta_acceptance(&self) -> Vec<f64> {
        self.theta_sampler.acceptance_rates()
    }

    /// Freezes the split weights, leaf scale and parameter step sizes.
    pub fn end_tuning(&mut self) {
        self.tuning = false;
        self.split_weights.freeze();
        self.theta_sampler.end_tuning();
    }

    /// One forest per tree group (a single forest unless trees are separate).
    pub fn forests(&self) -> Vec<Forest> {
        let shared = self.groups.len() == 1;
        self.groups
            .iter()
            .map(|g| Forest::new(g.trees.clone(), shared))
            .collect()
    }

    /// Total split counts over every tree currently in the ensemble.
    pub fn forest_split_counts(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0; p];
        for g in &self.groups {
            for t in &g.trees {
                t.add_split_counts(&mut counts);
            }
        }
        counts
    }

    /// Sum of trees recomputed by traversing every tree over the training rows.
    pub fn recompute_sum_mu(&self, x: &Matrix) -> Vec<f64> {
        let d = self.sum_mu.len() / x.n_rows().max(1);
        let mut out = vec![0.0; self.sum_mu.len()];
        for g in &self.groups {
            for t in &g.trees {
                for i in 0..x.n_rows() {
                    let v = t.predict(x.row(i)).expect("training rows are complete");
                    for (k, &dim) in g.dims.iter().enumerate() {
                        out[i * d + dim] += v[k];
                    }
                }
            }
        }
        out
    }

    /// `max |incremental - recomputed| / max |recomputed|`.
    pub fn sum_mu_relative_error(&self, x: &Matrix) -> f64 {
        let fresh = self.recompute_sum_mu(x);
        let scale = fresh.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        self.sum_mu
            .iter()
            .zip(&fresh)
            .fold(0.0f64, |a, (s, f)| a.max((s - f).abs()))
            / scale
    }

    /// Replaces the next batch of trees in every group.
    pub fn pg_step(&mut self, model: &Model) -> Result<StepStats, SamplerError> {
        let p = model.p();
        let batch = model.config.batch_size(self.tuning);
        let m = model.config.m;
        let mut stats = StepStats {
            variable_counts: vec![0; p],
            ..StepStats::default()
        };
        let mut depth_sum = 0usize;
        for g in 0..self.groups.len() {
            for _ in 0..batch {
                let idx = self.groups[g].cursor;
                self.groups[g].cursor = (idx + 1) % m;
                let outcome = self.replace_tree(model, g, idx)?;
                stats.trees_visited += 1;
                match outcome {
                    Replacement::Changed => stats.trees_changed += 1,
                    Replacement::Kept => {}
                    Replacement::ResampleFailed => stats.resample_failures += 1,
                }
                let tree = Arc::clone(&self.groups[g].trees[idx]);
                depth_sum += tree.max_depth();
                let counts = tree.count_split_vars(p);
                for (s, c) in stats.variable_counts.iter_mut().zip(&counts) {
                    *s += c;
                }
                if self.tuning {
                    self.split_weights.update(&counts);
                    let d = model.out_dim();
                    let pred = &self.groups[g].preds[idx];
                    self.trees_seen += 1;
                    let refresh = self.trees_seen >= m;
                    for &dim in &self.groups[g].dims {
                        let values = (0..model.n()).map(|i| pred[i * d + dim]);
                        if refresh {
                            self.leaf_scale.update_running_variance(dim, values);
                        } else {
                            self.leaf_scale.push_values(dim, values);
                        }
                    }
                } else {
                    for (s, c) in self.variable_inclusion.iter_mut().zip(&counts) {
                        *s += c;
                    }
                }
            }
        }
        if stats.trees_visited > 0 {
            stats.mean_depth = depth_sum as f64 / stats.trees_visited as f64;
        }
        Ok(stats)
    }

    fn replace_tree(&mut self, model: &Model, g: usize, idx: usize) -> Result<Replacement, SamplerError> {
        let n = model.n();
        let d = model.out_dim();
        let prep = model.likelihood.prepare(&self.theta)?;

        let old_pred = &self.groups[g].preds[idx];
        let base: Vec<f64> = self.sum_mu.iter().zip(old_pred).map(|(s, o)| s - o).collect();
        let frozen_log_lik = prep.total_of_sum(&base, old_pred);

        let kinds: Vec<SplitKind> = (0..model.p()).map(|j| model.split_kind(j)).collect();
        let group = &self.groups[g];
        let ctx = GrowContext {
            x: &model.x,
            sum_mu: &self.sum_mu,
            out_dim: d,
            dims: &group.dims,
            m: model.config.m,
            depth_prior: &self.depth_prior,
            split_weights: &self.split_weights,
            split_kinds: &kinds,
            leaf_scale: &self.leaf_scale,
        };

        let mut root = ParticleTree::new_root(group.init_value.clone(), &group.dims, n, d);
        root.log_lik = prep.total_of_sum(&base, &root.pred);
        let mut particles: Vec<ParticleTree> = vec![root; model.config.n_particles - 1];

        let rng = &mut self.rng;
        loop {
            let mut growing = false;
            for part in particles.iter_mut() {
                if part.expandable.is_empty() {
                    continue;
                }
                if grow_tree_once(part, &ctx, rng) {
                    let ll = prep.total_of_sum(&base, &part.pred);
                    part.log_weight += ll - part.log_lik;
                    part.log_lik = ll;
                }
                growing |= !part.expandable.is_empty();
            }
            if !growing {
                break;
            }
            match resample_particles(particles, rng) {
                Ok(p) => particles = p,
                Err(_) => {
                    warn!("particle weights collapsed while replacing tree {idx}; keeping the current tree");
                    return Ok(Replacement::ResampleFailed);
                }
            }
        }

        let log_liks: Vec<f64> = std::iter::once(frozen_log_lik)
            .chain(particles.iter().map(|p| p.log_lik))
            .collect();
        let Some(probs) = normalize_log_weights(&log_liks) else {
            warn!("all particles have -inf likelihood for tree {idx}; keeping the current tree");
            return Ok(Replacement::ResampleFailed);
        };
        let chosen = sample_categorical(&probs, rng);
        if chosen == 0 {
            return Ok(Replacement::Kept);
        }
        let winner = particles.swap_remove(chosen - 1);
        for ((s, b), v) in self.sum_mu.iter_mut().zip(&base).zip(&winner.pred) {
            *s = b + v;
        }
        let group = &mut self.groups[g];
        group.trees[idx] = Arc::new(winner.tree);
        group.preds[idx] = winner.pred;
        Ok(Replacement::Changed)
    }

    /// One Metropolis sweep over the scalar parameters.
    pub fn theta_step(&mut self, model: &Model) -> Result<Vec<bool>, SamplerError> {
        if self.theta.is_empty() {
            return Ok(Vec::new());
        }
        let (theta, accepted) = self
            .theta_sampler
            .step(&model.likelihood, &self.sum_mu, &self.theta, &mut self.rng)?;
        self.theta = theta;
        Ok(accepted)
    }

    pub fn pointwise_loglik(&self, model: &Model) -> Result<Vec<f64>, SamplerError> {
        Ok(model.likelihood.loglik(&self.sum_mu, &self.theta)?.1)
    }
}

enum Replacement {
    Changed,
    Kept,
    ResampleFailed,
}

/// Systematic resampling of the growing particles; afterwards every particle
/// carries the log of the mean unnormalized weight.
fn resample_particles<R: Rng + ?Sized>(
    particles: Vec<ParticleTree>,
    rng: &mut R,
) -> Result<Vec<ParticleTree>, SamplerError> {
    let log_w: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let indices = systematic_resample(&log_w, rng)?;
    let common = log_sum_exp(&log_w) - (particles.len() as f64).ln();
    let mut remaining = vec![0usize; particles.len()];
    for &i in &indices {
        remaining[i] += 1;
    }
    let mut slots: Vec<Option<ParticleTree>> = particles.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(indices.len());
    for &i in &indices {
        remaining[i] -= 1;
        let mut part = if remaining[i] == 0 {
            slots[i].take().expect("moved once")
        } else {
            slots[i].clone().expect("still present")
        };
        part.log_weight = common;
        out.push(part);
    }
    Ok(out)
}

/// Free-function form of [`SamplerState::init`].
pub fn init_state(model: &Model, seed: u64) -> Result<SamplerState, SamplerError> {
    SamplerState::init(model, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSettings {
    pub tune: usize,
    pub draws: usize,
    /// Keep a forest snapshot every `thin_forests` draws (0 keeps none).
    pub thin_forests: usize,
    /// Store pointwise log-likelihoods per draw.
    pub pointwise: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            tune: 1000,
            draws: 1000,
            thin_forests: 1,
            pointwise: true,
        }
    }
}

/// Runs one chain: alternating tree and parameter updates, tuning for the
/// first `tune` iterations, then recording `draws` iterations.
pub fn run_chain(model: &Model, chain: usize, seed: u64, settings: &RunSettings) -> Result<ChainTrace, SamplerError> {
    run_chain_with(model, chain, seed, settings, |_, _| {})
}

/// Like [`run_chain`], calling `hook(iteration, state)` after each iteration.
pub fn run_chain_with(
    model: &Model,
    chain: usize,
    seed: u64,
    settings: &RunSettings,
    mut hook: impl FnMut(usize, &SamplerState),
) -> Result<ChainTrace, SamplerError> {
    if settings.draws == 0 {
        return Err(SamplerError::Model("draws must be >= 1".into()));
    }
    let mut state = SamplerState::init(model, seed)?;
    let mut trace = ChainTrace::new(chain, seed);
    for it in 0..settings.tune + settings.draws {
        if it == settings.tune {
            state.end_tuning();
        }
        state.pg_step(model)?;
        state.theta_step(model)?;
        hook(it, &state);
        if it >= settings.tune {
            let draw = it - settings.tune;
            let pointwise = if settings.pointwise {
                state.pointwise_loglik(model)?
            } else {
                Vec::new()
            };
            let forests = (settings.thin_forests > 0 && draw % settings.thin_forests == 0).then(|| state.forests());
            trace.push_draw(
                state.sum_mu.clone(),
                state.theta.clone(),
                pointwise,
                state.forest_split_counts(model.p()),
                forests,
            );
        }
    }
    trace.theta_acceptance = state.theta_acceptance();
    trace.final_split_weights = state.split_weights.weights().to_vec();
    trace.final_leaf_scale = state.leaf_scale.eps().to_vec();
    Ok(trace)
}

/// Seed used by chain `chain` of a run seeded with `seed`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    seed.wrapping_add(chain as u64)
}

/// Runs `chains` independent chains in parallel on the current rayon pool.
pub fn run_chains(model: &Model, chains: usize, seed: u64, settings: &RunSettings) -> Result<Trace, SamplerError> {
    let traces = (0..chains)
        .into_par_iter()
        .map(|c| run_chain(model, c, chain_seed(seed, c), settings))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trace::new(
        traces,
        model.n(),
        model.out_dim(),
        model.p(),
        model.likelihood.spec().theta_names().iter().map(|s| s.to_string()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{Family, Link, LikelihoodSpec, ThetaPrior};

    fn line_model(m: usize, n_particles: usize) -> Model {
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x + 0.1 * (x * 37.0).sin()).collect();
        let spec = LikelihoodSpec::new(Family::Normal, Link::Identity, 1, vec![ThetaPrior::HalfNormal { scale: 1.0 }]).unwrap();
        let config = SamplerConfig {
            m,
            n_particles,
            ..SamplerConfig::default()
        };
        Model::new(
            Matrix::column_vector(&xs),
            Likelihood::new(spec, y.clone()).unwrap(),
            Matrix::column_vector(&y),
            vec![0.5],
            config,
        )
        .unwrap()
    }

    #[test]
    fn resample_hand_trace() {
        assert_eq!(systematic_resample_with_offset(&[0.2, 0.3, 0.5], 0.1), vec![0, 1, 2]);
        assert_eq!(systematic_resample_with_offset(&[0.0, 1.0, 0.0], 0.2), vec![1, 1, 1]);
        assert_eq!(systematic_resample_with_offset(&[0.25; 4], 0.01), vec![0, 1, 2, 3]);
    }

    #[test]
    fn resample_uniform_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(systematic_resample(&[0.0; 5], &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        }
        let w = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        assert_eq!(systematic_resample(&w, &mut rng).unwrap(), vec![1, 1, 1]);
        assert!(matches!(
            systematic_resample(&[f64::NEG_INFINITY; 3], &mut rng),
            Err(SamplerError::Resample)
        ));
    }

    #[test]
    fn batch_sizes() {
        let cfg = SamplerConfig {
            m: 15,
            ..SamplerConfig::default()
        };
        assert_eq!(cfg.batch_size(true), 2);
        let cfg = SamplerConfig {
            m: 50,
            ..SamplerConfig::default()
        };
        assert_eq!(cfg.batch_size(false), 5);
        let cfg = SamplerConfig {
            m: 1,
            ..SamplerConfig::default()
        };
        assert_eq!(cfg.batch_size(true), 1);
    }

    #[test]
    fn init_sets_mean_over_m() {
        let model = line_model(8, 10);
        let state = SamplerState::init(&model, 0).unwrap();
        let mean = model.likelihood.y().iter().sum::<f64>() / model.n() as f64;
        for f in state.forests() {
            for t in &f.trees {
                assert!((t.predict(&[0.0]).unwrap()[0] - mean / 8.0).abs() < 1e-12);
            }
        }
        for s in state.sum_mu() {
            assert!((s - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_particle_never_changes_trees() {
        let model = line_model(5, 1);
        let mut state = SamplerState::init(&model, 4).unwrap();
        let before = state.forests();
        for _ in 0..20 {
            let stats = state.pg_step(&model).unwrap();
            assert_eq!(stats.trees_changed, 0);
        }
        assert_eq!(state.forests(), before);
    }

    #[test]
    fn batches_cover_every_tree() {
        let model = line_model(23, 3);
        let mut state = SamplerState::init(&model, 2).unwrap();
        let mut seen = vec![false; 23];
        let steps = (1.0f64 / 0.1).ceil() as usize;
        for _ in 0..steps {
            let start = state.groups[0].cursor;
            let stats = state.pg_step(&model).unwrap();
            for k in 0..stats.trees_visited {
                seen[(start + k) % 23] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn sum_mu_tracks_trees() {
        let model = line_model(10, 5);
        let mut state = SamplerState::init(&model, 11).unwrap();
        for _ in 0..30 {
            state.pg_step(&model).unwrap();
            state.theta_step(&model).unwrap();
            assert!(state.sum_mu_relative_error(&model.x) < 1e-8);
        }
    }

    #[test]
    fn depth_prior_zero_keeps_single_leaf() {
        let model = line_model(3, 4);
        let state = SamplerState::init(&model, 0).unwrap();
        let prior = DepthPrior { alpha: 0.0, beta: 0.0 };
        let weights = SplitVarWeights::uniform(1).unwrap();
        let ctx = GrowContext {
            x: &model.x,
            sum_mu: state.sum_mu(),
            out_dim: 1,
            dims: &[0],
            m: 3,
            depth_prior: &prior,
            split_weights: &weights,
            split_kinds: &[],
            leaf_scale: state.leaf_scale(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut p = ParticleTree::new_root(vec![0.0], &[0], model.n(), 1);
            while !p.expandable.is_empty() {
                assert!(!grow_tree_once(&mut p, &ctx, &mut rng));
            }
            assert_eq!(p.tree.len(), 1);
        }
    }

    #[test]
    fn certain_prior_always_splits_root() {
        let model = line_model(3, 4);
        let state = SamplerState::init(&model, 0).unwrap();
        let prior = DepthPrior { alpha: 1.0, beta: 0.0 };
        let weights = SplitVarWeights::uniform(1).unwrap();
        let ctx = GrowContext {
            x: &model.x,
            sum_mu: state.sum_mu(),
            out_dim: 1,
            dims: &[0],
            m: 3,
            depth_prior: &prior,
            split_weights: &weights,
            split_kinds: &[],
            leaf_scale: state.leaf_scale(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut p = ParticleTree::new_root(vec![0.0], &[0], model.n(), 1);
            assert!(grow_tree_once(&mut p, &ctx, &mut rng));
            let (l, r) = (1, 2);
            assert_eq!(p.rows(l).len() + p.rows(r).len(), model.n());
            p.tree.audit().unwrap();
        }
    }

    #[test]
    fn determinism() {
        let model = line_model(6, 4);
        let settings = RunSettings {
            tune: 10,
            draws: 5,
            thin_forests: 1,
            pointwise: true,
        };
        let a = run_chain(&model, 0, 99, &settings).unwrap();
        let b = run_chain(&model, 0, 99, &settings).unwrap();
        assert_eq!(a, b);
        let c = run_chain(&model, 0, 100, &settings).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn draws_are_recorded_after_tuning() {
        let model = line_model(4, 3);
        let settings = RunSettings {
            tune: 3,
            draws: 1,
            thin_forests: 1,
            pointwise: false,
        };
        let t = run_chain(&model, 0, 1, &settings).unwrap();
        assert_eq!(t.n_draws(), 1);
        assert_eq!(t.forests.len(), 1);
    }

    #[test]
    fn selection_keeps_frozen_particle_possible() {
        let probs = normalize_log_weights(&[-10.0, -9.0, -12.0]).unwrap();
        assert!(probs[0] > 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
