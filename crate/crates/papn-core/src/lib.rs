//! Route-prediction model library: a proximity-attention encoder with a
//! pointer-network decoder, trained to predict courier pickup sequences under
//! time-window constraints.
//!
//! Everything is pure Rust over `f64`: a small reverse-mode autodiff arena
//! ([`autodiff`]), the model stack ([`encoder`], [`mixer`], [`decoder`],
//! [`model`]), ranking metrics with independently-coded oracles ([`metrics`]),
//! heuristic baselines ([`baselines`]), a synthetic instance generator
//! ([`generator`]), and a deterministic Adam trainer ([`trainer`]).

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod generator;
pub mod gradcheck;
pub mod instance;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod params;
pub mod trainer;

pub use autodiff::{AutodiffError, Graph, Var, MASKED};
pub use config::{ConfigError, TrainConfig};
pub use instance::{Batch, Instance, InstanceError, ValidationError};
pub use metrics::{MetricError, MetricReport};
pub use model::{ModelError, PapnModel};
pub use params::{Bindings, ParamId, ParamSet};
pub use trainer::{TrainError, TrainOutcome};
