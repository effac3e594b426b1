//! Entailment-rewarded RL fine-tuning for autoregressive sequence policies.
//!
//! The crate trains a small windowed feed-forward language-model policy on a
//! synthetic grounded-summarization task (documents are fact lists, summaries
//! are fact subsets), then fine-tunes it with an on-policy actor-critic policy
//! gradient. The reward combines a terminal entailment score from an exact
//! oracle with a KL penalty anchoring the policy to its supervised
//! initialization.
//!
//! Module map:
//! - [`mdp`]: vocabulary, token sequences, deterministic generation MDP
//! - [`policy`]: policy/value networks with analytic gradients, sampling, beam search
//! - [`rewards`]: entailment oracle, KL reward, combined reward, judge interface
//! - [`synthtask`]: fact-world corpus generation and data transforms
//! - [`trainer`]: MLE pretraining, GAE, policy/value losses, RL loop
//! - [`metrics`]: ROUGE, coverage, density, entailment rate, evaluation driver
//! - [`harness`]: configuration, presets, CLI command implementations, sweeps

pub mod harness;
pub mod mdp;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod synthtask;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type. CLI exit codes are derived from the variant.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (bad precondition).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite loss, gradient, or parameter detected during training.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// An enumeration or brute-force guard was exceeded.
    #[error("size guard exceeded: {0} leaves (limit {1})")]
    SizeGuard(f64, f64),
}

pub type Result<T> = std::result::Result<T, Error>;
