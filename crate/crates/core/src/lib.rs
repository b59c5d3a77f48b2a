//! Trajectory world model for heterogeneous dynamical systems.
//!
//! The crate covers the full desk-scale pipeline: synthetic trajectory
//! generation, channel tokenization with kinematic-tree structural
//! embeddings, a mixture-of-experts sequence model with system-aware
//! routing, training/distillation, rollout evaluation, and an MPPI
//! planner that can use either analytic dynamics or a trained
//! checkpoint as its rollout oracle.
//!
//! Data-parallel inner loops (MPPI sample rollouts, batch evaluation,
//! per-episode gradients) run on rayon when the `parallel` feature is
//! enabled (the default) and fall back to sequential execution
//! otherwise. Results are bit-identical either way: work is indexed,
//! per-index RNG streams are derived from the seed, and reductions
//! happen in fixed order.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod sim;
pub mod structure;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
