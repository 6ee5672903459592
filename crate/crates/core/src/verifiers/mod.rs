//! Clean-domain rewards, the noise-aware verifier and its training loops.

mod dataset;
mod network;
mod reward;
mod train;
mod verifier;

pub use dataset::{build_distill_dataset, clean_reward_dataset, DistillDataset, DistillRecord};
pub use network::{Cache, Mlp};
pub use reward::{reward_clean, RewardKind, RewardSpec};
pub use train::{
    bt_loss_grad, bt_pair_loss, mse_loss_grad, train_bradley_terry, train_curriculum, train_mse,
    train_separate, train_uniform_timecond, BtVariant, Objective, TrainConfig, TrainLog,
};
pub use verifier::{CheckpointMeta, NoiseAwareVerifier, StepStats};
