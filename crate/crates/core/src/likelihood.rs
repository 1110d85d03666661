//! Observation models linking the sum of trees to the response, plus a
//! random-walk Metropolis sampler for the scalar parameters that are not
//! modelled by trees.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Exponent clamp applied before `exp` in the links.
pub const EXP_CLAMP: f64 = 700.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, PartialEq)]
pub enum LikelihoodError {
    #[error("parameter {name} = {value} is outside its support")]
    Support { name: &'static str, value: f64 },
    #[error("{family:?} likelihood is incompatible with the {link:?} link")]
    IncompatibleLink { family: Family, link: Link },
    #[error("{family:?} likelihood does not support {out_dim} latent dimensions")]
    OutDim { family: Family, out_dim: usize },
    #[error("expected {expected} parameter values, got {got}")]
    ThetaLength { expected: usize, got: usize },
    #[error("response value {value} at row {row} is invalid for the {family:?} likelihood")]
    Response { row: usize, value: f64, family: Family },
    #[error("cannot apply {transform:?} to response value {value} at row {row}")]
    TransformDomain { row: usize, value: f64, transform: InitTransform },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Normal,
    Poisson,
    NegativeBinomial,
    Bernoulli,
}

/// Map from the latent sum of trees to the distribution mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Exp,
    Logistic,
}

impl Link {
    #[inline]
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Exp => eta.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
            Link::Logistic => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

/// Prior on a positive scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaPrior {
    HalfNormal { scale: f64 },
    Exponential { rate: f64 },
}

impl ThetaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        match *self {
            ThetaPrior::HalfNormal { scale } => {
                std::f64::consts::LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * (x / scale).powi(2)
            }
            ThetaPrior::Exponential { rate } => rate.ln() - rate * x,
        }
    }
}

/// Transform applied to the observed response to get the vector that
/// initializes the trees and sets the leaf proposal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitTransform {
    #[default]
    None,
    Log,
    Log1p,
}

pub fn init_response(y: &[f64], transform: InitTransform) -> Result<Vec<f64>, LikelihoodError> {
    y.iter()
        .enumerate()
        .map(|(row, &v)| {
            let err = LikelihoodError::TransformDomain {
                row,
                value: v,
                transform,
            };
            match transform {
                InitTransform::None => Ok(v),
                InitTransform::Log if v > 0.0 => Ok(v.ln()),
                InitTransform::Log1p if v >= 0.0 => Ok(v.ln_1p()),
                _ => Err(err),
            }
        })
        .collect()
}

/// Observation family, link and priors for the non-tree parameters.
///
/// A Normal likelihood with two latent dimensions is the heteroscedastic
/// model: column 0 is the location and `exp(column 1)` the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    pub family: Family,
    pub link: Link,
    pub out_dim: usize,
    pub theta_prior: Vec<ThetaPrior>,
}

/// Scalar parameters that are not modelled by trees.
pub fn theta_names_for(family: Family, out_dim: usize) -> &'static [&'static str] {
    match (family, out_dim) {
        (Family::Normal, 1) => &["sigma"],
        (Family::NegativeBinomial, _) => &["alpha"],
        _ => &[],
    }
}

impl LikelihoodSpec {
    pub fn new(family: Family, link: Link, out_dim: usize, theta_prior: Vec<ThetaPrior>) -> Result<Self, LikelihoodError> {
        let compatible = match family {
            Family::Normal => link == Link::Identity || link == Link::Exp,
            Family::Poisson | Family::NegativeBinomial => link == Link::Exp || link == Link::Identity,
            Family::Bernoulli => link == Link::Logistic,
        };
        if !compatible {
            return Err(LikelihoodError::IncompatibleLink { family, link });
        }
        let dims_ok = match family {
            Family::Normal => out_dim == 1 || out_dim == 2,
            _ => out_dim == 1,
        };
        if !dims_ok {
            return Err(LikelihoodError::OutDim { family, out_dim });
        }
        let spec = Self {
            family,
            link,
            out_dim,
            theta_prior,
        };
        if spec.theta_prior.len() != spec.theta_names().len() {
            return Err(LikelihoodError::ThetaLength {
                expected: spec.theta_names().len(),
                got: spec.theta_prior.len(),
            });
        }
        Ok(spec)
    }

    pub fn theta_names(&self) -> &'static [&'static str] {
        theta_names_for(self.family, self.out_dim)
    }

    pub fn is_binary(&self) -> bool {
        self.family == Family::Bernoulli
    }

    /// Response-scale value of latent dimension `dim`.
    pub fn inverse_link(&self, dim: usize, eta: f64) -> f64 {
        if dim == 0 {
            self.link.apply(eta)
        } else {
            Link::Exp.apply(eta)
        }
    }

    pub fn validate_response(&self, y: &[f64]) -> Result<(), LikelihoodError> {
        for (row, &v) in y.iter().enumerate() {
            let ok = v.is_finite()
                && match self.family {
                    Family::Normal => true,
                    Family::Poisson | Family::NegativeBinomial => v >= 0.0 && v.fract() == 0.0,
                    Family::Bernoulli => v == 0.0 || v == 1.0,
                };
            if !ok {
                return Err(LikelihoodError::Response {
                    row,
                    value: v,
                    family: self.family,
                });
            }
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), LikelihoodError> {
        let names = self.theta_names();
        if theta.len() != names.len() {
            return Err(LikelihoodError::ThetaLength {
                expected: names.len(),
                got: theta.len(),
            });
        }
        for (name, &v) in names.iter().zip(theta) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LikelihoodError::Support { name, value: v });
            }
        }
        Ok(())
    }
}

/// Likelihood bound to a response vector, with theta-independent terms cached.
#[derive(Debug, Clone)]
pub struct Likelihood {
    spec: LikelihoodSpec,
    y: Vec<f64>,
    ln_y_factorial: Vec<f64>,
}

impl Likelihood {
    pub fn new(spec: LikelihoodSpec, y: Vec<f64>) -> Result<Self, LikelihoodError> {
        spec.validate_response(&y)?;
        let ln_y_factorial = match spec.family {
            Family::Poisson | Family::NegativeBinomial => y.iter().map(|v| ln_gamma(v + 1.0)).collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            y,
            ln_y_factorial,
        })
    }

    pub fn spec(&self) -> &LikelihoodSpec {
        &self.spec
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Binds the likelihood to a parameter vector after a support check.
    pub fn prepare(&self, theta: &[f64]) -> Result<Prepared<'_>, LikelihoodError> {
        self.spec.check_theta(theta)?;
        let (param, nb_shift) = match (self.spec.family, self.spec.out_dim) {
            (Family::Normal, 1) => (theta[0], Vec::new()),
            (Family::NegativeBinomial, _) => {
                let alpha = theta[0];
                let lg_alpha = ln_gamma(alpha);
                let shift = self.y.iter().map(|v| ln_gamma(v + alpha) - lg_alpha).collect();
                (alpha, shift)
            }
            _ => (f64::NAN, Vec::new()),
        };
        Ok(Prepared {
            lik: self,
            param,
            ln_param: param.ln(),
            nb_shift,
        })
    }

    /// Total and pointwise log-likelihood of a row-major `n x out_dim` latent buffer.
    pub fn loglik(&self, latent: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>), LikelihoodError> {
        let prep = self.prepare(theta)?;
        let d = self.spec.out_dim;
        let pointwise: Vec<f64> = (0..self.n()).map(|i| prep.point(i, &latent[i * d..(i + 1) * d])).collect();
        let total = pointwise.iter().sum();
        Ok((total, pointwise))
    }
}

/// Free-function form of [`Likelihood::loglik`].
pub fn loglik(
    spec: &LikelihoodSpec,
    latent: &[f64],
    theta: &[f64],
    y: &[f64],
) -> Result<(f64, Vec<f64>), LikelihoodError> {
    Likelihood::new(spec.clone(), y.to_vec())?.loglik(latent, theta)
}

pub struct Prepared<'a> {
    lik: &'a Likelihood,
    param: f64,
    ln_param: f64,
    nb_shift: Vec<f64>,
}

impl Prepared<'_> {
    /// Log-density of observation `i` given its latent row.
    #[inline]
    pub fn point(&self, i: usize, eta: &[f64]) -> f64 {
        if eta.iter().any(|e| !e.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let y = self.lik.y[i];
        let spec = &self.lik.spec;
        match spec.family {
            Family::Normal => {
                let mu = spec.link.apply(eta[0]);
                let (sigma, ln_sigma) = if spec.out_dim == 2 {
                    let s = eta[1].clamp(-EXP_CLAMP, EXP_CLAMP);
                    (s.exp(), s)
                } else {
                    (self.param, self.ln_param)
                };
                let z = (y - mu) / sigma;
                -0.5 * LN_2PI - ln_sigma - 0.5 * z * z
            }
            Family::Poisson => {
                let lg = self.lik.ln_y_factorial[i];
                match spec.link {
                    Link::Exp => {
                        let e = eta[0].clamp(-EXP_CLAMP, EXP_CLAMP);
                        y * e - e.exp() - lg
                    }
                    _ => {
                        let rate = eta[0];
                        if rate > 0.0 {
                            y * rate.ln() - rate - lg
                        } else if rate == 0.0 && y == 0.0 {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    }
                }
            }
            Family::NegativeBinomial => {
                let alpha = self.param;
                let mu = spec.link.apply(eta[0]);
                if !(mu > 0.0) {
                    return if mu == 0.0 && y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
                }
                let ln_total = (alpha + mu).ln();
                self.nb_shift[i] - self.lik.ln_y_factorial[i] + alpha * (self.ln_param - ln_total)
                    + y * (mu.ln() - ln_total)
            }
            Family::Bernoulli => {
                let e = eta[0];
                // y * e - log(1 + exp(e)), overflow-safe
                let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                y * e - softplus
            }
        }
    }

    /// Total log-likelihood of the elementwise sum `base + delta` (both `n x out_dim`).
    pub fn total_of_sum(&self, base: &[f64], delta: &[f64]) -> f64 {
        let d = self.lik.spec.out_dim;
        let mut row = [0.0; 2];
        let mut total = 0.0;
        for i in 0..self.lik.n() {
            for k in 0..d {
                row[k] = base[i * d + k] + delta[i * d + k];
            }
            total += self.point(i, &row[..d]);
        }
        total
    }

    pub fn total(&self, latent: &[f64]) -> f64 {
        let d = self.lik.spec.out_dim;
        (0..self.lik.n()).map(|i| self.point(i, &latent[i * d..(i + 1) * d])).sum()
    }
}

/// Adaptive random-walk Metropolis on `log(theta)`, one coordinate at a time.
#[derive(Debug, Clone)]
pub struct ThetaSampler {
    log_step: Vec<f64>,
    tuning: bool,
    tune_iter: u64,
    accepted: Vec<u64>,
    proposed: Vec<u64>,
}

/// Target acceptance rate for a scalar random-walk proposal.
pub const TARGET_ACCEPT: f64 = 0.44;

impl ThetaSampler {
    pub fn new(n_params: usize, initial_step: f64) -> Self {
        Self {
            log_step: vec![initial_step.ln(); n_params],
            tuning: true,
            tune_iter: 0,
            accepted: vec![0; n_params],
            proposed: vec![0; n_params],
        }
    }

    pub fn step_scales(&self) -> Vec<f64> {
        self.log_step.iter().map(|s| s.exp()).collect()
    }

    pub fn end_tuning(&mut self) {
        self.tuning = false;
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.proposed)
            .map(|(&a, &p)| if p == 0 { f64::NAN } else { a as f64 / p as f64 })
            .collect()
    }

    /// One sweep over the parameters. Returns the new values and per-coordinate acceptance.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        lik: &Likelihood,
        latent: &[f64],
        theta: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<bool>), LikelihoodError> {
        let priors = &lik.spec().theta_prior;
        let mut current = theta.to_vec();
        let mut current_lp = log_target(lik, latent, &current, priors)?;
        let mut accepted = vec![false; current.len()];
        if self.tuning {
            self.tune_iter += 1;
        }
        for k in 0..current.len() {
            let step = self.log_step[k].exp();
            let z: f64 = StandardNormal.sample(rng);
            let mut proposal = current.clone();
            proposal[k] = (current[k].ln() + step * z).exp();
            let lp = if proposal[k] > 0.0 && proposal[k].is_finite() {
                log_target(lik, latent, &proposal, priors)?
            } else {
                f64::NEG_INFINITY
            };
            let u: f64 = rng.random();
            let accept = u.ln() < lp - current_lp || proposal[k] == current[k];
            if accept {
                current = proposal;
                current_lp = lp;
                self.accepted[k] += 1;
            }
            self.proposed[k] += 1;
            accepted[k] = accept;
            if self.tuning {
                let gain = (self.tune_iter as f64 + 1.0).powf(-0.6);
                let a = if accept { 1.0 } else { 0.0 };
                self.log_step[k] = (self.log_step[k] + gain * (a - TARGET_ACCEPT)).clamp(-12.0, 3.0);
            }
        }
        Ok((current, accepted))
    }
}

/// Free-function form of a single [`ThetaSampler`] sweep.
pub fn mh_step_theta<R: Rng + ?Sized>(
    sampler: &mut ThetaSampler,
    lik: &Likelihood,
    latent: &[f64],
    theta: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<bool>), LikelihoodError> {
    sampler.step(lik, latent, theta, rng)
}

/// Log posterior in log-theta coordinates (includes the Jacobian).
fn log_target(lik: &Likelihood, latent: &[f64], theta: &[f64], priors: &[ThetaPrior]) -> Result<f64, LikelihoodError> {
    let prep = lik.prepare(theta)?;
    let prior: f64 = priors
        .iter()
        .zip(theta)
        .map(|(p, &t)| p.log_density(t) + t.ln())
        .sum();
    Ok(prep.total(latent) + prior)
}
