//! Multi-domain identity-feature learning with impact-guided dropout.
//!
//! The library trains a small dense encoder jointly over several synthetic
//! domains, measures how much each feature neuron matters to each domain
//! (exactly, and by a second-order Taylor estimate), derives per-domain
//! dropout masks from those scores, and evaluates the learned features with
//! CMC retrieval curves.
//!
//! Module map:
//!
//! - [`tensor`], [`nn`] — dense network substrate: tensors, affine+ReLU
//!   layers, softmax cross-entropy, exact gradients, momentum SGD,
//!   checkpoints.
//! - [`data`] — synthetic multi-domain dataset generation, single-task label
//!   merging, train/val and probe/gallery protocol splits.
//! - [`impact`] — per-neuron impact scores per domain and their per-domain
//!   averages, plus cross-domain correlation diagnostics.
//! - [`dgd`] — dropout policies: standard, deterministic impact-guided, and
//!   stochastic impact-guided with temperature.
//! - [`schedule`] — the step and polynomial learning-rate rules.
//! - [`pipeline`] — the staged training procedure (individual baselines,
//!   joint single-task training, guided-dropout resume, per-domain
//!   fine-tuning) and its reports.
//! - [`eval`] — feature extraction under a policy, Euclidean ranking, CMC.
//!
//! All batch math funnels through [`par`], which runs data-parallel under
//! the `parallel` feature (rayon) and sequentially otherwise. Results are
//! collected in input order and reduced sequentially in both builds, so
//! outputs are bitwise identical regardless of the feature or worker count.

pub mod config;
pub mod data;
pub mod dgd;
pub mod error;
pub mod eval;
pub mod impact;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
