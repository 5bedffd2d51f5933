use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{checksum, BoundTextEncoder, FrozenBackbone, TEMPLATE_WORDS};
use crate::error::{Error, Result};
use crate::numerics::class_probs;
use crate::prompt::{EncoderVars, Mode, PromptContext, PromptEncoder};
use crate::tape::{GradientTape, Var};
use crate::tensor::{dot, Tensor};

use super::config::TrainConfig;

/// Everything that is trained: the context and the prompt encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub context: PromptContext,
    pub encoder: PromptEncoder,
}

impl PromptState {
    /// Fresh state for `cfg` on `backbone`. The context RNG is seeded from
    /// `cfg.seed`; the encoder uses `cfg.encoder.seed`.
    pub fn init(cfg: &TrainConfig, backbone: &FrozenBackbone) -> Result<Self> {
        cfg.validate(backbone.width())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let mode = cfg.init.resolve(cfg.m);
        let context = PromptContext::init(mode, cfg.m, backbone.vocab(), &mut rng)?;
        let encoder = PromptEncoder::new(cfg.encoder.clone(), backbone.width(), cfg.m)?;
        Ok(Self { context, encoder })
    }

    /// Context tensor followed by the encoder tensors.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![self.context.vectors()];
        out.extend(self.encoder.parameters().into_iter().map(|(_, t)| t));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![self.context.vectors_mut()];
        out.extend(self.encoder.parameters_mut());
        out
    }

    pub fn checksum(&self) -> String {
        checksum(self.parameters())
    }

    /// The context after the prompt encoder, in eval mode.
    pub fn reparameterized(&self) -> Result<Tensor> {
        self.encoder.reparameterize(&self.context, Mode::Eval)
    }
}

/// Gradients matching [`PromptState::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrads {
    pub context: Tensor,
    pub encoder: Vec<Tensor>,
}

impl StateGrads {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.context).chain(&self.encoder)
    }
}

/// Token embeddings of each class name.
pub fn class_tokens(backbone: &FrozenBackbone, names: &[String]) -> Result<Vec<Tensor>> {
    names.iter().map(|n| backbone.class_tokens(n)).collect()
}

/// Builds the `C x d` weight matrix: row `i` encodes `[F(V); c_i]`.
pub(crate) fn class_weights_on_tape(
    tape: &mut GradientTape,
    text: &BoundTextEncoder<'_>,
    encoder: &PromptEncoder,
    encoder_vars: &EncoderVars,
    context: Var,
    tokens: &[Tensor],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let prompt = encoder.reparameterize_on_tape(tape, encoder_vars, context, mode)?;
    let mut rows = Vec::with_capacity(tokens.len());
    for t in tokens {
        let c = tape.constant(t.clone());
        let seq = tape.concat_rows(&[prompt, c]);
        rows.push(text.encode(tape, seq)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "no classes to build weights for".into(),
        ));
    }
    Ok(tape.concat_rows(&rows))
}

/// Class weights for `names` under the current prompt state.
pub fn build_class_weights(
    backbone: &FrozenBackbone,
    state: &PromptState,
    names: &[String],
    mut mode: Mode<'_>,
) -> Result<Tensor> {
    let tokens = class_tokens(backbone, names)?;
    let mut tape = GradientTape::new();
    let text = backbone.text_encoder().bind(&mut tape);
    let vars = state.encoder.bind_frozen(&mut tape);
    let ctx = tape.constant(state.context.vectors().clone());
    let w = class_weights_on_tape(
        &mut tape,
        &text,
        &state.encoder,
        &vars,
        ctx,
        &tokens,
        &mut mode,
    )?;
    tape.ensure_finite()?;
    Ok(tape.value(w).clone())
}

/// Hand-written-template weights: encodes "a photo of a {class}".
pub fn zero_shot_weights(backbone: &FrozenBackbone, names: &[String]) -> Result<Tensor> {
    let template = backbone.vocab().embed_tokens(&TEMPLATE_WORDS)?;
    let enc = backbone.text_encoder();
    let mut rows = Vec::with_capacity(names.len());
    for n in names {
        let c = backbone.class_tokens(n)?;
        let mut data = template.data().to_vec();
        data.extend_from_slice(c.data());
        let seq = Tensor::matrix(template.rows() + c.rows(), template.cols(), data)?;
        rows.push(enc.encode(&seq)?.into_data());
    }
    Tensor::from_rows(&rows)
}

/// Class probabilities of feature `f` against weight rows, and the argmax.
pub fn predict(weights: &Tensor, f: &[f64], tau: f64) -> Result<(Vec<f64>, usize)> {
    if weights.cols() != f.len() {
        return Err(Error::Shape(format!(
            "feature width {} differs from weight width {}",
            f.len(),
            weights.cols()
        )));
    }
    let sims: Vec<f64> = (0..weights.rows())
        .map(|i| dot(weights.row(i), f))
        .collect();
    let probs = class_probs(&sims, tau)?;
    Ok((probs, argmax(&sims)))
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of a minibatch and its gradients, differentiated
/// through the prompt encoder and the frozen text encoder.
pub fn pre_loss_and_grads(
    backbone: &FrozenBackbone,
    state: &PromptState,
    tokens: &[Tensor],
    features: &Tensor,
    labels: &[usize],
    tau: f64,
    mut mode: Mode<'_>,
) -> Result<(f64, StateGrads)> {
    let mut tape = GradientTape::new();
    let text = backbone.text_encoder().bind(&mut tape);
    let vars = state.encoder.bind(&mut tape);
    let ctx = tape.param(state.context.vectors().clone());
    let w = class_weights_on_tape(
        &mut tape,
        &text,
        &state.encoder,
        &vars,
        ctx,
        tokens,
        &mut mode,
    )?;
    let f = tape.constant(features.clone());
    let logits = tape.matmul_nt(f, w);
    let loss = tape.softmax_xent(logits, labels, tau);
    let mut grads = tape.backward(loss)?;
    let context = grads
        .take(ctx)
        .unwrap_or_else(|| Tensor::zeros(state.context.vectors().shape()));
    let encoder = vars
        .vars()
        .iter()
        .zip(state.encoder.parameters())
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((tape.value(loss).data()[0], StateGrads { context, encoder }))
}

/// Minibatch loss only, in the given mode.
pub fn pre_loss(
    backbone: &FrozenBackbone,
    state: &PromptState,
    tokens: &[Tensor],
    features: &Tensor,
    labels: &[usize],
    tau: f64,
    mut mode: Mode<'_>,
) -> Result<f64> {
    let mut tape = GradientTape::new();
    let text = backbone.text_encoder().bind(&mut tape);
    let vars = state.encoder.bind_frozen(&mut tape);
    let ctx = tape.constant(state.context.vectors().clone());
    let w = class_weights_on_tape(
        &mut tape,
        &text,
        &state.encoder,
        &vars,
        ctx,
        tokens,
        &mut mode,
    )?;
    let f = tape.constant(features.clone());
    let logits = tape.matmul_nt(f, w);
    let loss = tape.softmax_xent(logits, labels, tau);
    tape.ensure_finite()?;
    Ok(tape.value(loss).data()[0])
}
