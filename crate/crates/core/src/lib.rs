//! Consistency-trajectory distillation of classifier-free-guided probability-flow
//! ODE trajectories, at toy scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`netcore`]: small MLPs with reverse-mode gradients, embeddings, RAdam, checkpoints.
//! * [`diffusion`]: VE schedule, EDM preconditioning, Karras grids, time sampling.
//! * [`teacher`]: conditioned Gaussian mixtures, the exact analytic denoiser and a
//!   trainable neural denoiser, plus teacher feature extraction.
//! * [`solver`]: Heun integration of the probability-flow ODE and the guided combination.
//! * [`distill`]: the student jump model, its losses and the training loop.
//! * [`sampler`]: gamma/nu multistep sampling.
//! * [`guidance`]: loss-based guidance through the student jump and initial-noise optimization.
//! * [`eval`]: energy distance, condition accuracy and step/quality reports.
//! * [`config`]: the sectioned key/value run configuration.
//!
//! Batch work (items of a training batch, sampling chains, pairwise distances) fans
//! out through [`par`], which uses rayon when the `parallel` feature is enabled and
//! reduces in a fixed order either way, so results are bit-identical across modes.

pub mod condition;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod netcore;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod solver;
pub mod teacher;

pub use condition::Cond;
pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
