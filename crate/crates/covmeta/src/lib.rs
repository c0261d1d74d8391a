//! Covariate-aware meta-learning for few-shot regression.
//!
//! The crate bundles:
//! * a small reverse-mode autodiff engine with higher-order support
//!   ([`tape`]), enough to differentiate through unrolled inner-loop
//!   gradient steps;
//! * a hierarchical-Bayes meta-learner that conditions its task prior on
//!   task covariates, plus MAML / Reptile / latent-only baselines;
//! * a synthetic multimodal few-shot regression benchmark with dependent
//!   and independent covariate↔function regimes;
//! * deterministic dataset / checkpoint / evaluation-file formats and a
//!   CLI (`covmeta`) to generate data, train, evaluate, and compare.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalrun;
pub mod gradcheck;
pub mod meta;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
