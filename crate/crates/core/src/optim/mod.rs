//! Token policy, rollouts in the crop environment, the clipped group-relative
//! objective and the training loop.

pub mod grpo;
pub mod policy;
pub mod rollout;
pub mod train;
pub mod vocab;

pub use grpo::{compute_advantages, grpo_loss, GroupBatch, GrpoError, LossConfig, LossOutput};
pub use policy::{DifferentiablePolicy, Mode, OraclePolicy, Policy, TabularSoftmaxPolicy};
pub use rollout::{run_episode, Episode, RolloutConfig, Trajectory};
pub use train::{evaluate, train, Checkpoint, GrpoConfig, IterMetrics};
pub use vocab::Token;
