use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::numerics::cosine_anneal_rate;
use crate::prompt::{Architecture, Mode};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::coop::coop_loss_and_grad;
use super::model::{class_tokens, pre_loss_and_grads, PromptState, StateGrads};
use super::task::{FewShotTask, Sample};

/// Which gradient path drives the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Route {
    /// Full tape through the prompt encoder.
    #[default]
    Pre,
    /// Hand-differentiated head, context only. Requires architecture `none`.
    DirectCoop,
}

/// Loss bookkeeping from a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Per-epoch mean loss, weighted by minibatch size.
    pub loss_history: Vec<f64>,
    /// Loss of every minibatch in order.
    pub step_losses: Vec<f64>,
    /// Steps per epoch.
    pub steps_per_epoch: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains from a fresh state built from `cfg`.
pub fn train_prompts(
    task: &FewShotTask,
    cfg: &TrainConfig,
    backbone: &FrozenBackbone,
) -> Result<(PromptState, TrainReport)> {
    let state = PromptState::init(cfg, backbone)?;
    train_from(state, task, cfg, backbone, Route::Pre)
}

/// Trains `state` in place with the given route.
///
/// Three independent streams of `cfg.seed` are used: 0 for minibatch order,
/// 1 for dropout, 2 for context initialization.
pub fn train_from(
    mut state: PromptState,
    task: &FewShotTask,
    cfg: &TrainConfig,
    backbone: &FrozenBackbone,
    route: Route,
) -> Result<(PromptState, TrainReport)> {
    cfg.validate(backbone.width())?;
    task.validate()?;
    if task.train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if route == Route::DirectCoop && state.encoder.config().architecture != Architecture::None {
        return Err(Error::InvalidArgument(
            "the direct route only trains architecture none".into(),
        ));
    }

    let names = task.names(&task.base);
    let tokens = class_tokens(backbone, &names)?;
    let local = |s: &Sample| -> Result<usize> {
        task.base
            .iter()
            .position(|&b| b == s.label)
            .ok_or_else(|| Error::Dataset(format!("train item {} is not a base class", s.id)))
    };
    let labels: Vec<usize> = task.train.iter().map(local).collect::<Result<_>>()?;

    let n = task.train.len();
    let schedule = cfg.schedule(n)?;
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);

    let mut velocity: Vec<Tensor> = state
        .parameters()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut report = TrainReport {
        steps_per_epoch: per_epoch,
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| task.train[i].feature.clone())
                .collect();
            let feats = Tensor::from_rows(&rows)?;
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = match route {
                Route::Pre => pre_loss_and_grads(
                    backbone,
                    &state,
                    &tokens,
                    &feats,
                    &ys,
                    cfg.tau,
                    Mode::Train(&mut drop_rng),
                )?,
                Route::DirectCoop => {
                    let (loss, g) = coop_loss_and_grad(
                        backbone,
                        state.context.vectors(),
                        &tokens,
                        &feats,
                        &ys,
                        cfg.tau,
                    )?;
                    (
                        loss,
                        StateGrads {
                            context: g,
                            encoder: Vec::new(),
                        },
                    )
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {} step {step}",
                    epoch + 1
                )));
            }
            let lr = cosine_anneal_rate(&schedule, step)?;
            sgd_step(
                &mut state,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            report.step_losses.push(loss);
            total += loss * batch.len() as f64;
            step += 1;
        }
        let mean = total / n as f64;
        log::debug!("epoch {}: loss {mean:.6}", epoch + 1);
        report.loss_history.push(mean);
    }
    Ok((state, report))
}

fn sgd_step(
    state: &mut PromptState,
    grads: &StateGrads,
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), buf) in state
        .parameters_mut()
        .into_iter()
        .zip(grads.iter())
        .zip(velocity)
    {
        if momentum == 0.0 && weight_decay == 0.0 {
            p.axpy(-lr, g);
            continue;
        }
        for ((x, gx), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            let d = gx + weight_decay * *x;
            *b = momentum * *b + d;
            *x -= lr * *b;
        }
    }
}
