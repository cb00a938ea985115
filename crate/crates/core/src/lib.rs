//! Particle dual averaging (PDA) for entropy-regularized risk minimization
//! over mean-field two-layer networks.
//!
//! The outer loop ([`pda::pda_run`]) folds loss derivatives into a
//! dual-averaged potential ([`potential::DualAverageState`]); the inner loop
//! ([`sampler::inner_loop`]) runs overdamped Langevin dynamics on every
//! particle against that potential.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod loss;
pub mod model;
pub mod pda;
pub mod potential;
pub mod rng;
pub mod sampler;

pub use error::{PdaError, Result};
pub use loss::LossKind;
pub use model::{ModelSpec, ParticleEnsemble};
pub use pda::{noisy_sgd_run, pda_run, RunConfig, RunData, RunOutput, Schedule, Scheme};
pub use potential::{DualAverageState, RegConfig, RiskMode};
