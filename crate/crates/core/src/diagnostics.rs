//! Convergence diagnostics: rank-normalized split R-hat, bulk effective
//! sample size, highest density intervals and ECDF summaries.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::trace::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum DiagError {
    #[error("need at least {need} chains, got {got}")]
    TooFewChains { need: usize, got: usize },
    #[error("need at least {need} draws per chain, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("chains have different lengths")]
    Ragged,
    #[error("non-finite value in draws")]
    NonFinite,
    #[error("probability {0} outside (0, 1)")]
    Prob(f64),
    #[error("need at least 2 samples")]
    TooFewSamples,
}

/// Reference line for bulk ESS in convergence plots (100 per chain for 4 chains).
pub const ESS_REFERENCE: f64 = 400.0;
/// Fixed R-hat threshold used when simulation calibration is disabled.
pub const RHAT_FALLBACK: f64 = 1.01;

fn check(chains: &[Vec<f64>], min_chains: usize) -> Result<usize, DiagError> {
    if chains.len() < min_chains {
        return Err(DiagError::TooFewChains {
            need: min_chains,
            got: chains.len(),
        });
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagError::Ragged);
    }
    if n < 4 {
        return Err(DiagError::TooFewDraws { need: 4, got: n });
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DiagError::NonFinite);
    }
    Ok(n)
}

/// Splits every chain into its first and last `n / 2` draws.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains[0].len();
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..].to_vec()])
        .collect()
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Replaces pooled draws by normal scores of their average ranks,
/// `z = Phi^-1((r - 3/8) / (S + 1/4))`.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len() as f64;
    let ranks = average_ranks(&flat);
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(
            ranks[pos..pos + c.len()]
                .iter()
                .map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25)))
                .collect(),
        );
        pos += c.len();
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var_ddof1(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn rhat_raw(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| var_ddof1(c)).collect::<Vec<_>>());
    let b = n * var_ddof1(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    ((w * (n - 1.0) / n + b / n) / w).sqrt()
}

/// Rank-normalized split R-hat over `chains[c][draw]`.
///
/// Every chain is split in half, the pooled draws are rank-normalized and
/// `sqrt((W (n-1)/n + B/n) / W)` is computed over the halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagError> {
    check(chains, 2)?;
    if is_constant(chains) {
        return Ok(1.0);
    }
    Ok(rhat_raw(&rank_normalize(&split_chains(chains))))
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|v| *v == first)
}

/// Biased (divide by n) autocovariance of `x` at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// ESS of chains already prepared (split and normalized) using Geyer's
/// initial monotone sequence. Autocovariances are computed lag by lag until
/// the sequence is truncated.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let n_chain = chains.len();
    let n_draw = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &m)| autocov(c, m, lag))
            .sum::<f64>()
            / n_chain as f64
    };
    let nd = n_draw as f64;
    let acov0 = mean_acov(0);
    let mean_var = acov0 * nd / (nd - 1.0);
    let mut var_plus = mean_var * (nd - 1.0) / nd;
    if n_chain > 1 {
        var_plus += var_ddof1(&means);
    }
    let total = (n_chain * n_draw) as f64;
    if var_plus == 0.0 {
        return total;
    }
    let rho = |acov: f64| 1.0 - (mean_var - acov) / var_plus;

    let mut rho_hat = vec![0.0; n_draw];
    rho_hat[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho(mean_acov(1));
    rho_hat[1] = rho_odd;
    let mut t = 1;
    while t + 3 < n_draw && rho_even + rho_odd > 0.0 {
        rho_even = rho(mean_acov(t + 1));
        rho_odd = rho(mean_acov(t + 2));
        if rho_even + rho_odd >= 0.0 {
            rho_hat[t + 1] = rho_even;
            rho_hat[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t.saturating_sub(2);
    if rho_even > 0.0 && max_t + 1 < n_draw {
        rho_hat[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let head: f64 = rho_hat[..=max_t.min(n_draw - 1)].iter().sum();
    let tail = rho_hat.get(max_t + 1).copied().unwrap_or(0.0);
    let tau = (-1.0 + 2.0 * head + tail).max(1.0 / total.log10());
    total / tau
}

/// Rank-normalized bulk effective sample size over split chains.
/// A single chain is accepted.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64, DiagError> {
    let n = check(chains, 1)?;
    if is_constant(chains) {
        return Ok((n * chains.len()) as f64);
    }
    Ok(ess_raw(&rank_normalize(&split_chains(chains))))
}

/// Number of points an HDI at `prob` must contain.
pub fn hdi_count(n: usize, prob: f64) -> usize {
    // guard against products such as 0.94 * 50 landing a hair above an integer
    let raw = prob * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n)
}

/// Narrowest window of sorted samples holding `ceil(prob * n)` points,
/// earliest window on ties.
pub fn hdi(samples: &[f64], prob: f64) -> Result<(f64, f64), DiagError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(DiagError::Prob(prob));
    }
    if samples.len() < 2 {
        return Err(DiagError::TooFewSamples);
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(DiagError::NonFinite);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = hdi_count(s.len(), prob);
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for i in 0..=s.len() - k {
        let w = s[i + k - 1] - s[i];
        if w < best_width {
            best_width = w;
            best = i;
        }
    }
    Ok((s[best], s[best + k - 1]))
}

/// Empirical CDF points `(x_(i), i / n)` over sorted values.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect()
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Seed of the null-distribution simulation for the R-hat threshold.
pub const RHAT_SIM_SEED: u64 = 0x5eed_0f_4a7;

/// R-hat threshold adjusted for monitoring `k` quantities: the
/// `1 - 0.05 / k` quantile of R-hat over iid normal chains of the given
/// shape. `max(k, 1000)` replicates are simulated with a fixed seed.
pub fn rhat_threshold(k: usize, chains: usize, draws: usize) -> Result<f64, DiagError> {
    if chains < 2 {
        return Err(DiagError::TooFewChains { need: 2, got: chains });
    }
    if draws < 4 {
        return Err(DiagError::TooFewDraws { need: 4, got: draws });
    }
    let k = k.max(1);
    let reps = k.max(1000);
    let sims: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(RHAT_SIM_SEED);
            rng.set_stream(r as u64);
            let a: Vec<Vec<f64>> = (0..chains)
                .map(|_| (0..draws).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            split_rhat(&a).expect("valid shape")
        })
        .collect();
    Ok(quantile(&sims, 1.0 - 0.05 / k as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct PointDiagnostic {
    pub row: usize,
    pub dim: usize,
    pub ess: f64,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSummary {
    pub points: Vec<PointDiagnostic>,
    pub ess_ecdf: Vec<(f64, f64)>,
    pub rhat_ecdf: Option<Vec<(f64, f64)>>,
    pub ess_reference: f64,
    pub rhat_threshold: Option<f64>,
    pub warnings: Vec<String>,
}

impl ConvergenceSummary {
    /// Fraction of points whose R-hat is below the threshold.
    pub fn fraction_below_threshold(&self) -> Option<f64> {
        let t = self.rhat_threshold?;
        let n = self.points.len() as f64;
        Some(self.points.iter().filter(|p| p.rhat.is_some_and(|r| r < t)).count() as f64 / n)
    }
}

/// Per-point ESS and R-hat of the latent sum of trees.
///
/// With one chain R-hat is omitted and a warning is recorded. When
/// `simulate_threshold` is false the fixed fallback threshold is used.
pub fn convergence_summary(trace: &Trace, simulate_threshold: bool) -> Result<ConvergenceSummary, DiagError> {
    let chains = trace.n_chains();
    let draws = trace.n_draws();
    let mut warnings = Vec::new();
    let with_rhat = chains >= 2;
    if !with_rhat {
        let msg = "only one chain: R-hat is not computed".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }
    let cells: Vec<(usize, usize)> = (0..trace.n)
        .flat_map(|i| (0..trace.out_dim).map(move |k| (i, k)))
        .collect();
    let points = cells
        .par_iter()
        .map(|&(row, dim)| {
            let a = trace.latent_draws(row, dim);
            Ok(PointDiagnostic {
                row,
                dim,
                ess: ess_bulk(&a)?,
                rhat: if with_rhat { Some(split_rhat(&a)?) } else { None },
            })
        })
        .collect::<Result<Vec<_>, DiagError>>()?;
    let ess: Vec<f64> = points.iter().map(|p| p.ess).collect();
    let (rhat_ecdf, rhat_threshold) = if with_rhat {
        let r: Vec<f64> = points.iter().filter_map(|p| p.rhat).collect();
        let t = if simulate_threshold {
            rhat_threshold(points.len(), chains, draws)?
        } else {
            RHAT_FALLBACK
        };
        (Some(ecdf(&r)), Some(t))
    } else {
        (None, None)
    };
    Ok(ConvergenceSummary {
        points,
        ess_ecdf: ecdf(&ess),
        rhat_ecdf,
        ess_reference: ESS_REFERENCE,
        rhat_threshold,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn iid(chains: usize, draws: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|_| (0..draws).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn constant_chains() {
        let a = vec![vec![3.0; 10]; 4];
        assert_eq!(split_rhat(&a).unwrap(), 1.0);
        assert_eq!(ess_bulk(&a).unwrap(), 40.0);
    }

    #[test]
    fn iid_rhat_near_one() {
        let r = split_rhat(&iid(4, 10_000, 1)).unwrap();
        assert!((0.99..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn disjoint_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = [0.0, 10.0]
            .iter()
            .map(|c| (0..100).map(|_| c + 1e-6 * rng.random::<f64>()).collect())
            .collect();
        assert!(split_rhat(&a).unwrap() > 1.1);
    }

    #[test]
    fn iid_ess() {
        let e = ess_bulk(&iid(4, 1000, 3)).unwrap();
        assert!((3200.0..=4800.0).contains(&e), "{e}");
        let e2 = ess_bulk(&iid(4, 2000, 3)).unwrap();
        assert!((e2 / e - 2.0).abs() < 0.5, "{e} {e2}");
    }

    #[test]
    fn ar1_ess() {
        let rho = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 5000;
        let a: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = StandardNormal.sample(&mut rng);
                let mut v: Vec<f64> = Vec::with_capacity(draws);
                for _ in 0..draws {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x = rho * x + (1.0f64 - rho * rho).sqrt() * z;
                    v.push(x);
                }
                v
            })
            .collect();
        let expected = 4.0 * draws as f64 * (1.0 - rho) / (1.0 + rho);
        let e = ess_bulk(&a).unwrap();
        assert!(e > expected / 1.5 && e < expected * 1.5, "{e} vs {expected}");
    }

    #[test]
    fn hdi_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(hdi(&s, 0.5).unwrap(), (1.0, 50.0));
        assert_eq!(hdi(&[2.5; 7], 0.94).unwrap(), (2.5, 2.5));
        let mut b = vec![0.0; 50];
        b.extend(vec![10.0; 50]);
        assert_eq!(hdi(&b, 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(hdi(&s, 1.0), Err(DiagError::Prob(1.0)));
        assert_eq!(hdi(&s, 0.0), Err(DiagError::Prob(0.0)));
    }

    #[test]
    fn hdi_count_rounding() {
        assert_eq!(hdi_count(100, 0.94), 94);
        assert_eq!(hdi_count(50, 0.94), 47);
        assert_eq!(hdi_count(100, 0.5), 50);
        assert_eq!(hdi_count(3, 0.5), 2);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ecdf_monotone() {
        let e = ecdf(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(e.last().unwrap().1, 1.0);
        assert!(e.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn threshold_above_one() {
        let t = rhat_threshold(50, 4, 100).unwrap();
        assert!(t > 1.0 && t < 1.1, "{t}");
        assert_eq!(t, rhat_threshold(50, 4, 100).unwrap());
        assert!(rhat_threshold(500, 4, 100).unwrap() >= t);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(split_rhat(&iid(1, 10, 0)), Err(DiagError::TooFewChains { .. })));
        assert!(matches!(split_rhat(&iid(2, 3, 0)), Err(DiagError::TooFewDraws { .. })));
        assert!(ess_bulk(&iid(1, 10, 0)).is_ok());
        assert_eq!(split_rhat(&[vec![1.0; 4], vec![1.0; 5]]), Err(DiagError::Ragged));
    }
}
