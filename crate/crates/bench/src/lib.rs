//! Benchmark fixtures.

use pre_lab_core::harness::{generate_synthetic_task, LoadedTask, SyntheticTaskSpec};
use pre_lab_core::prompt::Architecture;
use pre_lab_core::train::{PromptState, TrainConfig};

/// Synthetic task at the default backbone size: C=10, d=32, K=16.
pub fn task() -> LoadedTask {
    let syn =
        generate_synthetic_task(&SyntheticTaskSpec::new(10, 32, 16, 0.1)).expect("fixture task");
    LoadedTask {
        manifest: syn.manifest.clone(),
        backbone: syn.backbone.clone(),
        task: syn.task().expect("fixture split"),
    }
}

pub fn config(arch: Architecture) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.encoder.architecture = arch;
    cfg
}

pub fn state(task: &LoadedTask, arch: Architecture) -> PromptState {
    PromptState::init(&config(arch), &task.backbone).expect("fixture state")
}
