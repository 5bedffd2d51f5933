//! Synthetic tasks, experiment runs, sweeps, checkpoints, and inspection.

mod ablation;
mod checkpoint;
mod experiment;
mod gradcheck;
mod interpret;
mod synth;

pub use ablation::{
    load_grid, run_ablation_grid, thread_cap, AblationGrid, CellResult, GridCell, THREADS_ENV,
};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use experiment::{
    evaluate_checkpoint, load_experiment_config, prepare_task, run_experiment, run_on_task,
    ExperimentConfig, ExperimentOutcome, MetricsRow, METRICS_HEADER,
};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport, GroupError};
pub use interpret::{nearest_words, Distance, NearestWordReport, Neighbor};
pub use synth::{
    class_names, generate_synthetic_task, load_task_dir, prompt_weights, write_synthetic_task,
    LoadedTask, OracleRecord, SyntheticTask, SyntheticTaskSpec, TaskManifest, FEATURES_FILE,
    ORACLE_FILE, TASK_FILE,
};
