//! Class weights, the training loop, and base-to-new evaluation.

mod config;
mod coop;
mod eval;
mod model;
mod task;
mod trainer;

pub use config::{ContextInit, TrainConfig};
pub use coop::coop_loss_and_grad;
pub use eval::{
    accuracy, evaluate_base_to_new, harmonic_mean, mean_of_h, score_with_weights, split_accuracy,
    RunMetrics,
};
pub use model::{
    build_class_weights, class_tokens, pre_loss, pre_loss_and_grads, predict, zero_shot_weights,
    PromptState, StateGrads,
};
pub use task::{sample_k_shot, split_base_new, FewShotTask, KShotSelection, Sample};
pub use trainer::{train_from, train_prompts, Route, TrainReport};
