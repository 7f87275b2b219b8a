//! Comparison methods: reward-model guided sampling, full finetuning and
//! low-rank adapter finetuning.

pub mod finetune;
pub mod lora;
pub mod reward;

pub use finetune::{finetune_full, finetune_lora, FinetuneConfig, FinetuneOutcome};
pub use lora::LowRankSet;
pub use reward::{
    bt_loss, guided_sample, train_reward_model, RewardModel, RewardTrainConfig, RewardTrainReport,
};
