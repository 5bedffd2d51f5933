use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::error::{Error, Result};
use crate::numerics::finite_diff_check;
use crate::prompt::{Architecture, EncoderConfig, Mode, PromptContext, Sharing};
use crate::tensor::{dot, Tensor};
use crate::train::{
    build_class_weights, class_tokens, coop_loss_and_grad, pre_loss, pre_loss_and_grads,
    ContextInit, PromptState, TrainConfig,
};

use super::synth::{class_names, read_json};

/// Small problem on which the full-loss gradients are checked numerically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(rename = "d", default = "default_width")]
    pub width: usize,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(rename = "C", default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_coop_tolerance")]
    pub coop_tolerance: f64,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Architecture>,
    #[serde(default)]
    pub sharing: Sharing,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Random directions per encoder tensor.
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Encoder weights are multiplied by this after initialization so the
    /// nonlinearities leave their linear regime.
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    /// Spread of the Gaussian context vectors. Much larger than the training
    /// init so the attention and gate gradients clear the rounding floor.
    #[serde(default = "default_context_std")]
    pub context_std: f64,
    /// Spread of the check features around the current class weights.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
}

fn default_width() -> usize {
    8
}
fn default_m() -> usize {
    4
}
fn default_classes() -> usize {
    4
}
fn default_batch() -> usize {
    8
}
fn default_tau() -> f64 {
    0.01
}
fn default_eps() -> f64 {
    1e-4
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_coop_tolerance() -> f64 {
    1e-12
}
fn default_architectures() -> Vec<Architecture> {
    vec![
        Architecture::Bilstm,
        Architecture::Mlp,
        Architecture::Transformer,
    ]
}
fn default_true() -> bool {
    true
}
fn default_directions() -> usize {
    4
}
fn default_weight_scale() -> f64 {
    1.0
}
fn default_context_std() -> f64 {
    0.5
}
fn default_feature_noise() -> f64 {
    1.0
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl GradCheckConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(vec![j.to_string()]),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dropout_rate != 0.0 {
            errs.push(
                "dropoutRate: gradient checking needs a deterministic graph (set it to 0)".into(),
            );
        }
        if self.classes < 2 {
            errs.push("C: need at least 2 classes".to_string());
        }
        if self.batch == 0 {
            errs.push("batch: must be positive".into());
        }
        if self.directions == 0 {
            errs.push("directions: must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            errs.push("tau, eps: must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Errors for one parameter tensor. `coordinate` perturbs every entry on
/// its own; `directional` moves the whole tensor along random unit
/// directions. The context has no directional figure and is judged per
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub architecture: Architecture,
    pub group: String,
    pub coordinate: f64,
    pub directional: Option<f64>,
}

impl GroupError {
    /// The figure that decides pass or fail.
    pub fn judged(&self) -> f64 {
        self.directional.unwrap_or(self.coordinate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    /// Largest `|pre - direct|` over the context gradient, relative to
    /// `max(1, max |grad|)`.
    pub coop_max_diff: f64,
    pub tolerance: f64,
    pub coop_tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.judged() < self.tolerance)
            && self.coop_max_diff < self.coop_tolerance
    }

    /// Worst judged error for one architecture.
    pub fn worst(&self, arch: Architecture) -> Option<f64> {
        self.groups
            .iter()
            .filter(|g| g.architecture == arch)
            .map(GroupError::judged)
            .reduce(f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:<24} {:>10} {:>11}",
            "arch", "group", "coordinate", "directional"
        )?;
        for g in &self.groups {
            let mark = if g.judged() < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let dir = g
                .directional
                .map_or("-".to_string(), |x| format!("{x:.3e}"));
            writeln!(
                f,
                "{:<12} {:<24} {:>10.3e} {:>11} {mark}",
                g.architecture.as_str(),
                g.group,
                g.coordinate,
                dir
            )?;
        }
        let mark = if self.coop_max_diff < self.coop_tolerance {
            "ok"
        } else {
            "FAIL"
        };
        writeln!(
            f,
            "{:<12} {:<24} {:>10.3e} {:>11} {mark}",
            "none", "context vs direct", self.coop_max_diff, "-"
        )
    }
}

struct Problem {
    backbone: FrozenBackbone,
    names: Vec<String>,
    tokens: Vec<Tensor>,
    labels: Vec<usize>,
}

fn problem(cfg: &GradCheckConfig) -> Result<Problem> {
    let names = class_names(cfg.classes);
    let mut bcfg = BackboneConfig::new(cfg.seed, cfg.width);
    bcfg.vocab_size = 16 + cfg.classes;
    bcfg.max_context = bcfg.max_context.max(cfg.m + 1);
    let backbone = FrozenBackbone::new(bcfg, &names)?;
    let tokens = class_tokens(&backbone, &names)?;
    let labels = (0..cfg.batch).map(|i| i % cfg.classes).collect();
    Ok(Problem {
        backbone,
        names,
        tokens,
        labels,
    })
}

/// Unit features scattered around the class weights of `state`.
fn features(cfg: &GradCheckConfig, p: &Problem, state: &PromptState) -> Result<Tensor> {
    let w = build_class_weights(&p.backbone, state, &p.names, Mode::Eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let noise = Tensor::randn(&[cfg.batch, cfg.width], cfg.feature_noise, &mut rng);
    let mut f = Tensor::zeros(&[cfg.batch, cfg.width]);
    for (i, &y) in p.labels.iter().enumerate() {
        let row: Vec<f64> = w
            .row(y)
            .iter()
            .zip(noise.row(i))
            .map(|(a, b)| a + b)
            .collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        f.row_mut(i)
            .iter_mut()
            .zip(&row)
            .for_each(|(o, x)| *o = x / n);
    }
    Ok(f)
}

fn state(cfg: &GradCheckConfig, p: &Problem, arch: Architecture) -> Result<PromptState> {
    let mut enc = EncoderConfig::new(arch);
    enc.sharing = cfg.sharing;
    enc.residual = cfg.residual || arch == Architecture::None;
    enc.dropout_rate = 0.0;
    enc.seed = cfg.seed;
    let tc = TrainConfig {
        m: cfg.m,
        tau: cfg.tau,
        seed: cfg.seed,
        init: ContextInit::Gaussian,
        encoder: enc,
        ..TrainConfig::default()
    };
    let mut s = PromptState::init(&tc, &p.backbone)?;
    for t in s.encoder.parameters_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= cfg.weight_scale);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    s.context = PromptContext::new(Tensor::randn(
        &[cfg.m, cfg.width],
        cfg.context_std,
        &mut rng,
    ))?;
    Ok(s)
}

/// Central differences of the full loss for each architecture. The context
/// is checked per coordinate, every encoder tensor per coordinate and along
/// random directions. The architecture-none context gradient is also
/// compared with the direct path. Refuses to run with dropout on.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let p = problem(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut groups = Vec::new();
    for &arch in &cfg.architectures {
        let base = state(cfg, &p, arch)?;
        let feats = features(cfg, &p, &base)?;
        let loss = |s: &PromptState| {
            pre_loss(
                &p.backbone,
                s,
                &p.tokens,
                &feats,
                &p.labels,
                cfg.tau,
                Mode::Eval,
            )
        };
        let (_, grads) = pre_loss_and_grads(
            &p.backbone,
            &base,
            &p.tokens,
            &feats,
            &p.labels,
            cfg.tau,
            Mode::Eval,
        )?;
        let mut probe = base.clone();
        let ctx = finite_diff_check(
            |v| {
                probe.context = PromptContext::new(v.clone())?;
                loss(&probe)
            },
            base.context.vectors(),
            &grads.context,
            cfg.eps,
        )?;
        groups.push(GroupError {
            architecture: arch,
            group: "context".into(),
            coordinate: ctx.max_rel_error,
            directional: None,
        });
        let params: Vec<(String, Tensor)> = base
            .encoder
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (k, (name, theta)) in params.into_iter().enumerate() {
            let mut probe = base.clone();
            let coord = finite_diff_check(
                |t| {
                    *probe.encoder.parameters_mut()[k] = t.clone();
                    loss(&probe)
                },
                &theta,
                &grads.encoder[k],
                cfg.eps,
            )?;
            let g = &grads.encoder[k];
            let gn = g.norm();
            let dirs: Vec<Tensor> = (0..cfg.directions)
                .map(|i| {
                    let mut u = Tensor::randn(theta.shape(), 1.0, &mut rng);
                    let n = u.norm();
                    u = u.map(|x| x / n);
                    if i == 0 && gn > 0.0 {
                        u = Tensor::zeros(theta.shape());
                    }
                    if gn > 0.0 {
                        u.axpy(1.0 / gn, g);
                    }
                    let n = u.norm();
                    u.map(|x| x / n)
                })
                .collect();
            let along = Tensor::vector(
                dirs.iter()
                    .map(|u| dot(u.data(), grads.encoder[k].data()))
                    .collect(),
            );
            let dir = finite_diff_check(
                |t| {
                    let mut moved = theta.clone();
                    for (u, &s) in dirs.iter().zip(t.data()) {
                        moved.axpy(s, u);
                    }
                    *probe.encoder.parameters_mut()[k] = moved;
                    loss(&probe)
                },
                &Tensor::zeros(&[cfg.directions]),
                &along,
                cfg.eps,
            )?;
            groups.push(GroupError {
                architecture: arch,
                group: name,
                coordinate: coord.max_rel_error,
                directional: Some(dir.max_rel_error),
            });
        }
    }

    let plain = state(cfg, &p, Architecture::None)?;
    let feats = features(cfg, &p, &plain)?;
    let (_, g_pre) = pre_loss_and_grads(
        &p.backbone,
        &plain,
        &p.tokens,
        &feats,
        &p.labels,
        cfg.tau,
        Mode::Eval,
    )?;
    let (_, g_direct) = coop_loss_and_grad(
        &p.backbone,
        plain.context.vectors(),
        &p.tokens,
        &feats,
        &p.labels,
        cfg.tau,
    )?;
    let scale = g_pre
        .context
        .data()
        .iter()
        .fold(1.0f64, |m, x| m.max(x.abs()));
    let coop_max_diff = g_pre
        .context
        .data()
        .iter()
        .zip(g_direct.data())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        groups,
        coop_max_diff,
        tolerance: cfg.tolerance,
        coop_tolerance: cfg.coop_tolerance,
    })
}
