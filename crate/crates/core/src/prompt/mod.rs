//! Learnable prompt context and the reparameterizing prompt encoder.
//!
//! The encoder maps each context vector `v_i` to `net(v_i) + v_i` (or
//! `net(v_i)` without the residual), where `net` is a BiLSTM, a bottleneck
//! MLP, or a small transformer encoder. With `Architecture::None` the
//! context passes through untouched, which is plain soft-prompt tuning.

mod bilstm;
mod mlp;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bilstm::{BiLstm, LstmCell};
pub use mlp::BottleneckMlp;
pub use transformer::{EncoderLayer, TransformerNet};

use crate::backbone::{Vocabulary, TEMPLATE_WORDS};
use crate::error::{Error, Result};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Standard deviation of Gaussian prompt and encoder weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    None,
    Bilstm,
    Mlp,
    Transformer,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::None,
        Architecture::Bilstm,
        Architecture::Mlp,
        Architecture::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::None => "none",
            Architecture::Bilstm => "bilstm",
            Architecture::Mlp => "mlp",
            Architecture::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    #[default]
    Shared,
    Separate,
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Shared => "shared",
            Sharing::Separate => "separate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default = "shared")]
    pub sharing: Sharing,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// MLP bottleneck width; `None` means `d / 2`.
    #[serde(default)]
    pub bottleneck_dim: Option<usize>,
    #[serde(default = "two")]
    pub transformer_layers: usize,
    #[serde(default = "two")]
    pub transformer_heads: usize,
    /// Transformer feed-forward width; `None` means `4 d`.
    #[serde(default)]
    pub feedforward_dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Zero the output layer so the encoder starts as the identity map.
    #[serde(default)]
    pub identity_start: bool,
}

fn yes() -> bool {
    true
}
fn shared() -> Sharing {
    Sharing::Shared
}
fn default_dropout() -> f64 {
    0.1
}
fn two() -> usize {
    2
}

impl EncoderConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            residual: true,
            sharing: Sharing::Shared,
            dropout_rate: default_dropout(),
            bottleneck_dim: None,
            transformer_layers: 2,
            transformer_heads: 2,
            feedforward_dim: None,
            seed: 0,
            identity_start: false,
        }
    }

    /// Checks the config against embedding width `d`, listing every problem.
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.dropout_rate) {
            errs.push(format!("dropoutRate: {} outside [0, 1)", self.dropout_rate));
        }
        match self.architecture {
            Architecture::None => {}
            Architecture::Bilstm => {
                if !d.is_multiple_of(2) {
                    errs.push(format!("width: BiLSTM needs an even width, got {d}"));
                }
            }
            Architecture::Mlp => {
                if self.bottleneck(d) < 1 {
                    errs.push("bottleneckDim: must be at least 1".into());
                }
            }
            Architecture::Transformer => {
                let h = self.transformer_heads;
                if h == 0 || !d.is_multiple_of(h) {
                    errs.push(format!("transformerHeads: {h} must divide width {d}"));
                }
                if self.transformer_layers == 0 {
                    errs.push("transformerLayers: must be at least 1".into());
                }
                if self.feedforward(d) == 0 {
                    errs.push("feedforwardDim: must be at least 1".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn bottleneck(&self, d: usize) -> usize {
        self.bottleneck_dim.unwrap_or(d / 2)
    }

    pub fn feedforward(&self, d: usize) -> usize {
        self.feedforward_dim.unwrap_or(4 * d)
    }

    fn uses_dropout(&self) -> bool {
        self.dropout_rate > 0.0
            && matches!(
                self.architecture,
                Architecture::Mlp | Architecture::Transformer
            )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Embeddings of the hand-written template (`M` must be 4).
    Template,
    /// `N(0, 0.02^2)` per coordinate.
    Gaussian,
}

/// The `M x d` learnable context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext {
    vectors: Tensor,
}

impl PromptContext {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::Shape(format!(
                "context must be M x d with M, d >= 1, got {:?}",
                vectors.shape()
            )));
        }
        Ok(Self { vectors })
    }

    pub fn init<R: Rng + ?Sized>(
        mode: InitMode,
        m: usize,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        match mode {
            InitMode::Template => {
                if m != TEMPLATE_WORDS.len() {
                    return Err(Error::InvalidArgument(format!(
                        "template init needs M = {}, got {m}",
                        TEMPLATE_WORDS.len()
                    )));
                }
                Self::new(vocab.embed_tokens(&TEMPLATE_WORDS)?)
            }
            InitMode::Gaussian => Self::new(Tensor::randn(&[m, vocab.width()], INIT_STD, rng)),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }
}

/// The inner network of the prompt encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderNet {
    Bilstm(BiLstm),
    Mlp(BottleneckMlp),
    Transformer(TransformerNet),
}

impl EncoderNet {
    fn names(&self) -> Vec<String> {
        match self {
            EncoderNet::Bilstm(_) => BiLstm::NAMES.iter().map(|s| s.to_string()).collect(),
            EncoderNet::Mlp(_) => BottleneckMlp::NAMES.iter().map(|s| s.to_string()).collect(),
            EncoderNet::Transformer(t) => t.names(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            EncoderNet::Bilstm(n) => n.params(),
            EncoderNet::Mlp(n) => n.params(),
            EncoderNet::Transformer(n) => n.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            EncoderNet::Bilstm(n) => n.params_mut(),
            EncoderNet::Mlp(n) => n.params_mut(),
            EncoderNet::Transformer(n) => n.params_mut(),
        }
    }

    fn zero_output(&mut self) {
        match self {
            EncoderNet::Bilstm(n) => n.zero_output(),
            EncoderNet::Mlp(n) => n.zero_output(),
            EncoderNet::Transformer(n) => n.zero_output(),
        }
    }

    fn forward(&self, tape: &mut GradientTape, vars: &[Var], x: Var) -> Var {
        match self {
            EncoderNet::Bilstm(n) => n.forward(tape, vars, x),
            EncoderNet::Mlp(n) => n.forward(tape, vars, x),
            EncoderNet::Transformer(n) => n.forward(tape, vars, x),
        }
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Trainable encoder parameters loaded onto a tape, in
/// [`PromptEncoder::parameters`] order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Reparameterization function `F(v) = net(v) [+ v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    config: EncoderConfig,
    width: usize,
    tokens: usize,
    nets: Vec<EncoderNet>,
}

impl PromptEncoder {
    /// Seeds one network (shared) or `m` networks (separate) for width `d`.
    pub fn new(config: EncoderConfig, d: usize, m: usize) -> Result<Self> {
        config.validate(d)?;
        if m == 0 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let copies = match (config.architecture, config.sharing) {
            (Architecture::None, _) => 0,
            (_, Sharing::Shared) => 1,
            (_, Sharing::Separate) => m,
        };
        let mut nets = Vec::with_capacity(copies);
        for _ in 0..copies {
            let mut net = match config.architecture {
                Architecture::Bilstm => EncoderNet::Bilstm(BiLstm::init(d, INIT_STD, &mut rng)),
                Architecture::Mlp => EncoderNet::Mlp(BottleneckMlp::init(
                    d,
                    config.bottleneck(d),
                    INIT_STD,
                    &mut rng,
                )),
                Architecture::Transformer => EncoderNet::Transformer(TransformerNet::init(
                    d,
                    config.transformer_layers,
                    config.transformer_heads,
                    config.feedforward(d),
                    INIT_STD,
                    &mut rng,
                )),
                Architecture::None => unreachable!(),
            };
            if config.identity_start {
                net.zero_output();
            }
            nets.push(net);
        }
        Ok(Self {
            config,
            width: d,
            tokens: m,
            nets,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of context tokens the encoder was built for.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn nets(&self) -> &[EncoderNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [EncoderNet] {
        &mut self.nets
    }

    /// Zeroes every network's output layer.
    pub fn zero_output_layers(&mut self) {
        for n in &mut self.nets {
            n.zero_output();
        }
    }

    /// Named trainable tensors, `net{k}.{name}`.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.nets
            .iter()
            .enumerate()
            .flat_map(|(k, n)| {
                n.names()
                    .into_iter()
                    .map(move |name| format!("net{k}.{name}"))
                    .zip(n.params())
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets
            .iter_mut()
            .flat_map(EncoderNet::params_mut)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Loads the parameters onto `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut GradientTape) -> EncoderVars {
        let vars = self
            .nets
            .iter()
            .flat_map(EncoderNet::params)
            .map(|t| tape.param(t.clone()))
            .collect();
        EncoderVars { vars }
    }

    /// Loads the parameters onto `tape` as frozen constants.
    pub fn bind_frozen(&self, tape: &mut GradientTape) -> EncoderVars {
        let vars = self
            .nets
            .iter()
            .flat_map(EncoderNet::params)
            .map(|t| tape.constant(t.clone()))
            .collect();
        EncoderVars { vars }
    }

    fn check_context(&self, m: usize, d: usize) -> Result<()> {
        if d != self.width {
            return Err(Error::Shape(format!(
                "context width {d} differs from encoder width {}",
                self.width
            )));
        }
        if self.config.sharing == Sharing::Separate
            && self.config.architecture != Architecture::None
            && m != self.nets.len()
        {
            return Err(Error::Shape(format!(
                "separate encoder has {} networks for {m} tokens",
                self.nets.len()
            )));
        }
        Ok(())
    }

    /// Applies the network (without residual) to the whole context.
    fn apply_net(
        &self,
        tape: &mut GradientTape,
        vars: &EncoderVars,
        context: Var,
        mode: &mut Mode<'_>,
    ) -> Var {
        let m = tape.value(context).rows();
        let out = match self.config.sharing {
            Sharing::Shared => self.nets[0].forward(tape, &vars.vars, context),
            Sharing::Separate => {
                let mut offset = 0;
                let mut rows = Vec::with_capacity(m);
                for (i, net) in self.nets.iter().enumerate() {
                    let n = net.params().len();
                    let row = tape.row(context, i);
                    rows.push(net.forward(tape, &vars.vars[offset..offset + n], row));
                    offset += n;
                }
                tape.concat_rows(&rows)
            }
        };
        match mode {
            Mode::Train(rng) if self.config.uses_dropout() => {
                let p = self.config.dropout_rate;
                let shape = tape.value(out).shape().to_vec();
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..shape.iter().product::<usize>())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask).expect("mask shape"));
                tape.mul(out, mask)
            }
            _ => out,
        }
    }

    /// Reparameterizes an `M x d` context on the tape.
    pub fn reparameterize_on_tape(
        &self,
        tape: &mut GradientTape,
        vars: &EncoderVars,
        context: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let (m, d) = {
            let c = tape.value(context);
            (c.rows(), c.cols())
        };
        self.check_context(m, d)?;
        if self.config.architecture == Architecture::None {
            return Ok(context);
        }
        let out = self.apply_net(tape, vars, context, mode);
        Ok(if self.config.residual {
            tape.add(out, context)
        } else {
            out
        })
    }

    /// Returns the reparameterized context `[F(v_1), ..., F(v_M)]`.
    pub fn reparameterize(&self, context: &PromptContext, mut mode: Mode<'_>) -> Result<Tensor> {
        let mut tape = GradientTape::new();
        let vars = self.bind_frozen(&mut tape);
        let c = tape.constant(context.vectors().clone());
        let out = self.reparameterize_on_tape(&mut tape, &vars, c, &mut mode)?;
        tape.ensure_finite()?;
        Ok(tape.value(out).clone())
    }

    fn raw_net(&self, arch: Architecture, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        if self.config.architecture != arch {
            return Err(Error::InvalidArgument(format!(
                "encoder is {}, not {arch}",
                self.config.architecture
            )));
        }
        if x.cols() != self.width {
            return Err(Error::Shape(format!(
                "input width {} differs from encoder width {}",
                x.cols(),
                self.width
            )));
        }
        let mut mode = mode;
        let mut tape = GradientTape::new();
        let vars = self.bind_frozen(&mut tape);
        let shared = Self {
            config: EncoderConfig {
                sharing: Sharing::Shared,
                ..self.config.clone()
            },
            width: self.width,
            tokens: self.tokens,
            nets: vec![self.nets[0].clone()],
        };
        let n0 = self.nets[0].params().len();
        let vars = EncoderVars {
            vars: vars.vars[..n0].to_vec(),
        };
        let xv = tape.constant(x.clone());
        let out = shared.apply_net(&mut tape, &vars, xv, &mut mode);
        tape.ensure_finite()?;
        Ok(tape.value(out).clone())
    }

    /// BiLSTM output for an `M x d` sequence (first network, no residual).
    pub fn bilstm_apply(&self, v: &Tensor) -> Result<Tensor> {
        self.raw_net(Architecture::Bilstm, v, Mode::Eval)
    }

    /// Bottleneck MLP output for one `d` vector (first network, no residual).
    pub fn mlp_apply(&self, v: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let row = v.clone().reshape(&[1, v.len()])?;
        self.raw_net(Architecture::Mlp, &row, mode)
    }

    /// Transformer-encoder output for an `M x d` sequence (first network,
    /// no residual).
    pub fn transformer_apply(&self, v: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        self.raw_net(Architecture::Transformer, v, mode)
    }
}

/// Every trainable scalar: the `M x d` context plus all encoder networks.
pub fn count_trainable_params(encoder: &PromptEncoder, context: &PromptContext) -> usize {
    context.vectors().len() + encoder.parameter_count()
}

#[cfg(test)]
mod tests;
