//! Cooperative multi-agent training on toy Markov games.

pub mod env;
pub mod gae;
pub mod loss;
pub mod optim;
pub mod rollout;
pub mod tabular;
pub mod train;

pub use env::{ConsensusGame, ForagingConfig, ForagingLite, MarkovGame, Transition};
pub use gae::gae;
pub use loss::{categorical_entropy, mappo_loss, LossCoefficients, LossDiagnostics};
pub use optim::{clip_global_norm, Adam};
pub use rollout::{collect_rollout, RolloutBatch};
pub use tabular::{advantage_decomposition_check, permutations, ProductPolicy, TabularGame};
pub use train::{evaluate, ppo_update, IterationStats, TrainConfig, Trainer, UpdateStats};
