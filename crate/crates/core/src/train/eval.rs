use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::prompt::Mode;
use crate::tensor::Tensor;

use super::model::{build_class_weights, predict, PromptState};
use super::task::{FewShotTask, Sample};
use super::trainer::TrainReport;

/// Percentage of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `2ab / (a + b)`, and 0 when both are 0.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base >= 0.0 && new >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "harmonic mean needs non-negative inputs, got {base} and {new}"
        )));
    }
    if base + new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * new / (base + new))
}

/// Mean of per-run harmonic means.
pub fn mean_of_h(runs: &[RunMetrics]) -> Option<f64> {
    if runs.is_empty() {
        return None;
    }
    Some(runs.iter().map(|r| r.h_mean).sum::<f64>() / runs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunMetrics {
    pub base_acc: f64,
    pub new_acc: f64,
    pub h_mean: f64,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    pub checksum: String,
}

/// Closed-set accuracy of `items` against `weights`, whose rows are the
/// classes in `classes` order. Items are scored in parallel and reduced in
/// input order.
pub fn split_accuracy(
    weights: &Tensor,
    classes: &[usize],
    items: &[&Sample],
    tau: f64,
) -> Result<f64> {
    let preds: Vec<usize> = items
        .par_iter()
        .map(|s| predict(weights, &s.feature, tau).map(|(_, j)| classes[j]))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = items.iter().map(|s| s.label).collect();
    accuracy(&preds, &labels)
}

/// Base and new accuracy from given per-split weights.
pub fn score_with_weights(
    task: &FewShotTask,
    base_weights: &Tensor,
    new_weights: &Tensor,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let base_items: Vec<&Sample> = task
        .test
        .iter()
        .filter(|s| task.base.contains(&s.label))
        .collect();
    let new_items: Vec<&Sample> = task
        .test
        .iter()
        .filter(|s| task.new.contains(&s.label))
        .collect();
    if base_items.is_empty() || new_items.is_empty() {
        return Err(Error::Dataset(format!(
            "test split needs base and new items, got {} and {}",
            base_items.len(),
            new_items.len()
        )));
    }
    let b = split_accuracy(base_weights, &task.base, &base_items, tau)?;
    let n = split_accuracy(new_weights, &task.new, &new_items, tau)?;
    Ok((b, n, harmonic_mean(b, n)?))
}

/// Scores the trained state on the task's test items.
pub fn evaluate_base_to_new(
    state: &PromptState,
    task: &FewShotTask,
    backbone: &FrozenBackbone,
    tau: f64,
    report: &TrainReport,
) -> Result<RunMetrics> {
    let wb = build_class_weights(backbone, state, &task.names(&task.base), Mode::Eval)?;
    let wn = build_class_weights(backbone, state, &task.names(&task.new), Mode::Eval)?;
    let (base_acc, new_acc, h_mean) = score_with_weights(task, &wb, &wn, tau)?;
    Ok(RunMetrics {
        base_acc,
        new_acc,
        h_mean,
        loss_history: report.loss_history.clone(),
        final_loss: report.final_loss(),
        checksum: state.checksum(),
    })
}
