//! Entropy-guided structured exploration for outcome-rewarded token
//! generation.
//!
//! A linear softmax policy generates answers to synthetic chain-sum tasks.
//! Training either explores from high-entropy prefixes of correct rollouts
//! and modulates advantages by value progress (`fr3e`), or uses plain
//! group-normalized advantages (`grpo++`). Both optimize the same
//! clip-higher surrogate.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod advantage;
pub mod error;
pub mod explore;
pub mod first_return;
pub mod mdp;
pub mod policy;
pub mod runlog;
pub mod scalar;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
pub use mdp::{generate_task_suite, Mdp, TaskInstance, Token, Trajectory};
pub use policy::{Gradient, PolicyParams};
pub use scalar::Scalar;
pub use telemetry::{MetricsHistory, StepStats};
pub use trainer::{run_training, Algorithm, Precision, TrainConfig, Trainer};

pub type PolicyF64 = PolicyParams<f64>;
pub type PolicyF32 = PolicyParams<f32>;
pub type TrajectoryF64 = Trajectory<f64>;
pub type TrajectoryF32 = Trajectory<f32>;
pub type TrainerF64 = Trainer<f64>;
pub type TrainerF32 = Trainer<f32>;
