//! Bayesian additive regression trees fitted with a particle-Gibbs sampler.

pub mod diagnostics;
pub mod ingest;
pub mod interpret;
pub mod likelihood;
pub mod matrix;
pub mod proposals;
pub mod sampler;
pub mod trace;
pub mod tree;

pub use likelihood::{Family, Likelihood, LikelihoodSpec, Link};
pub use matrix::Matrix;
pub use sampler::{run_chain, run_chains, Model, RunSettings, SamplerConfig, SamplerState};
pub use trace::{ChainTrace, Trace};
pub use tree::{Forest, Tree};
