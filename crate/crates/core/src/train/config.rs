use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LrSchedule;
use crate::prompt::{Architecture, EncoderConfig, InitMode};

/// How the context vectors are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextInit {
    /// Template embeddings when `M = 4`, Gaussian otherwise.
    #[default]
    Auto,
    Template,
    Gaussian,
}

impl ContextInit {
    pub fn resolve(self, m: usize) -> InitMode {
        match self {
            ContextInit::Template => InitMode::Template,
            ContextInit::Gaussian => InitMode::Gaussian,
            ContextInit::Auto if m == 4 => InitMode::Template,
            ContextInit::Auto => InitMode::Gaussian,
        }
    }
}

/// Optimization recipe. Defaults: 50 epochs, batch 32, SGD at 0.002 with
/// cosine annealing to 0, `M = 4`, 16 shots, `tau = 0.01`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default)]
    pub eta_min: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub init: ContextInit,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.002
}
fn default_m() -> usize {
    4
}
fn default_k() -> usize {
    16
}
fn default_tau() -> f64 {
    0.01
}
fn default_encoder() -> EncoderConfig {
    EncoderConfig::new(Architecture::Bilstm)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr0: default_lr(),
            eta_min: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            m: default_m(),
            k: default_k(),
            tau: default_tau(),
            init: ContextInit::Auto,
            encoder: default_encoder(),
        }
    }
}

impl TrainConfig {
    /// Validates every field against width `d`, collecting all problems.
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs: must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batchSize: must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            errs.push(format!("lr0: must be positive, got {}", self.lr0));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            errs.push(format!(
                "etaMin: must lie in [0, lr0], got {}",
                self.eta_min
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum: outside [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!(
                "weightDecay: must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.m == 0 {
            errs.push("M: must be positive".into());
        }
        if self.k == 0 {
            errs.push("K: must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("tau: must be positive, got {}", self.tau));
        }
        if self.init == ContextInit::Template && self.m != 4 {
            errs.push(format!("init: template needs M = 4, got {}", self.m));
        }
        if let Err(Error::Config(mut e)) = self.encoder.validate(d) {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Steps per epoch times epochs for `n` training items.
    pub fn schedule(&self, n: usize) -> Result<LrSchedule> {
        let steps = n.div_ceil(self.batch_size) * self.epochs;
        LrSchedule::new(self.lr0, self.eta_min, steps)
    }
}
