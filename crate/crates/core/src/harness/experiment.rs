use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::prompt::{EncoderConfig, Mode};
use crate::tensor::Tensor;
use crate::train::{
    class_tokens, evaluate_base_to_new, pre_loss, sample_k_shot, train_prompts, FewShotTask,
    PromptState, RunMetrics, TrainConfig, TrainReport,
};

use super::checkpoint::Checkpoint;
use super::synth::{load_task_dir, LoadedTask};

pub const METRICS_HEADER: [&str; 11] = [
    "run_id",
    "arch",
    "residual",
    "sharing",
    "M",
    "K",
    "seed",
    "base_acc",
    "new_acc",
    "h_mean",
    "final_loss",
];

/// One training run: where the task lives, where outputs go, and the recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub task_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_run_id() -> String {
    "run".into()
}

impl ExperimentConfig {
    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.metrics.csv", self.run_id))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir
            .join(format!("{}.checkpoint.json", self.run_id))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.report.json", self.run_id))
    }
}

/// Keys present in `value` that `template` lacks, as dotted paths.
pub(crate) fn unknown_keys(value: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(got), Value::Object(known)) = (value, template) else {
        return;
    };
    for (k, v) in got {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match known.get(k) {
            None => out.push(format!("{path}: unknown field")),
            Some(t) => unknown_keys(v, t, &path, out),
        }
    }
}

pub(crate) fn train_template() -> Value {
    let mut train = TrainConfig::default();
    train.encoder = EncoderConfig {
        bottleneck_dim: Some(1),
        feedforward_dim: Some(1),
        ..train.encoder
    };
    serde_json::to_value(train).expect("config serializes")
}

/// Parses a config, reporting every unknown field at once, and resolves
/// relative paths against the config's directory.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    let mut template = serde_json::json!({
        "runId": "", "taskDir": "", "outDir": "",
    });
    template["train"] = train_template();
    let mut errs = Vec::new();
    unknown_keys(&value, &template, "", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if cfg.task_dir.is_relative() {
        cfg.task_dir = base.join(&cfg.task_dir);
    }
    if cfg.out_dir.is_relative() {
        cfg.out_dir = base.join(&cfg.out_dir);
    }
    Ok(cfg)
}

/// Prepares the task for a run: validates the recipe against the task
/// width and draws the K-shot training subset under the run seed.
pub fn prepare_task(loaded: &LoadedTask, cfg: &TrainConfig) -> Result<FewShotTask> {
    cfg.validate(loaded.backbone.width())?;
    let mut task = loaded.task.clone();
    let pick = sample_k_shot(&task.train, &task.base, cfg.k, cfg.seed)?;
    task.train = pick.items;
    Ok(task)
}

/// Trains and evaluates one configuration on an already loaded task.
pub fn run_on_task(loaded: &LoadedTask, cfg: &TrainConfig) -> Result<(PromptState, RunMetrics)> {
    let task = prepare_task(loaded, cfg)?;
    let before = loaded.backbone.checksum();
    let (state, report) = train_prompts(&task, cfg, &loaded.backbone)?;
    debug_assert_eq!(before, loaded.backbone.checksum());
    let metrics = evaluate_base_to_new(&state, &task, &loaded.backbone, cfg.tau, &report)?;
    Ok((state, metrics))
}

/// A metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub cfg: TrainConfig,
    pub metrics: Option<RunMetrics>,
}

impl MetricsRow {
    /// Fields in header order; metric fields are empty when absent.
    pub fn record(&self) -> Vec<String> {
        let e = &self.cfg.encoder;
        let mut r = vec![
            self.run_id.clone(),
            e.architecture.to_string(),
            e.residual.to_string(),
            e.sharing.to_string(),
            self.cfg.m.to_string(),
            self.cfg.k.to_string(),
            self.cfg.seed.to_string(),
        ];
        match &self.metrics {
            Some(m) => {
                r.extend([m.base_acc, m.new_acc, m.h_mean, m.final_loss].map(|x| x.to_string()))
            }
            None => r.extend(std::iter::repeat_n(String::new(), 4)),
        }
        r
    }
}

pub(crate) fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        other => Error::Dataset(format!("{other:?}")),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub metrics: RunMetrics,
    pub row: MetricsRow,
    pub state: PromptState,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Loads the task, trains, evaluates, and writes the metrics CSV, a JSON
/// report with the loss history, and a checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let loaded = load_task_dir(&cfg.task_dir)?;
    cfg.train.validate(loaded.backbone.width())?;
    let (state, metrics) = run_on_task(&loaded, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let row = MetricsRow {
        run_id: cfg.run_id.clone(),
        cfg: cfg.train.clone(),
        metrics: Some(metrics.clone()),
    };
    let metrics_path = cfg.metrics_path();
    write_rows(&metrics_path, &METRICS_HEADER, &[row.record()])?;
    super::synth::write_json(&cfg.report_path(), &metrics)?;
    let checkpoint_path = cfg.checkpoint_path();
    Checkpoint::new(
        &state,
        &cfg.train,
        &loaded.manifest.backbone,
        &loaded.manifest.class_names,
    )
    .save(&checkpoint_path)?;
    Ok(ExperimentOutcome {
        metrics,
        row,
        state,
        metrics_path,
        checkpoint_path,
    })
}

/// Scores a checkpoint on the config's task. `final_loss` is the eval-mode
/// loss over the K-shot training subset and the history is empty.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<RunMetrics> {
    let loaded = load_task_dir(&cfg.task_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.backbone != loaded.manifest.backbone || ck.class_names != loaded.manifest.class_names {
        return Err(Error::Checkpoint(
            "checkpoint was trained against a different backbone or class list".into(),
        ));
    }
    let state = ck.to_state(loaded.backbone.width())?;
    let task = prepare_task(&loaded, &ck.config)?;
    let tokens = class_tokens(&loaded.backbone, &task.names(&task.base))?;
    let rows: Vec<Vec<f64>> = task.train.iter().map(|s| s.feature.clone()).collect();
    let labels: Vec<usize> = task
        .train
        .iter()
        .map(|s| {
            task.base
                .iter()
                .position(|&b| b == s.label)
                .unwrap_or(usize::MAX)
        })
        .collect();
    let loss = pre_loss(
        &loaded.backbone,
        &state,
        &tokens,
        &Tensor::from_rows(&rows)?,
        &labels,
        ck.config.tau,
        Mode::Eval,
    )?;
    let report = TrainReport {
        loss_history: vec![loss],
        ..TrainReport::default()
    };
    let mut m = evaluate_base_to_new(&state, &task, &loaded.backbone, ck.config.tau, &report)?;
    m.loss_history.clear();
    Ok(m)
}
