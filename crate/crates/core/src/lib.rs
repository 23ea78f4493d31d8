//! A desk-scale laboratory for reinforcement learning with verifiable
//! rewards.
//!
//! A tabular autoregressive softmax policy is trained on synthetic
//! modular-arithmetic tasks with a family of clipped importance-ratio
//! surrogates: token-level (GRPO), sequence-level (GSPO), their hybrid
//! mixture with averaged or entropy-guided weights and branch-specific
//! clipping (DHPO), and two reconstructed baselines (GMPO, CISPO). Analytic
//! gradients are checked against a finite-difference oracle.

pub mod advantage;
pub mod audit;
pub mod config;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod ratios;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
