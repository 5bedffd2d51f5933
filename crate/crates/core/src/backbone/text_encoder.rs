use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self_attention, AttentionVars};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const POSITIONAL_STD: f64 = 0.01;

#[derive(Clone, Debug)]
struct Layer {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Layer {
    fn init<R: Rng + ?Sized>(d: usize, layers: usize, rng: &mut R) -> Self {
        let residual_std = INIT_STD / (layers as f64).sqrt();
        Self {
            ln1_gain: Tensor::filled(&[1, d], 1.0),
            ln1_bias: Tensor::zeros(&[1, d]),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            bq: Tensor::zeros(&[1, d]),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            bk: Tensor::zeros(&[1, d]),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            bv: Tensor::zeros(&[1, d]),
            wo: Tensor::randn(&[d, d], residual_std, rng),
            bo: Tensor::zeros(&[1, d]),
            ln2_gain: Tensor::filled(&[1, d], 1.0),
            ln2_bias: Tensor::zeros(&[1, d]),
            w1: Tensor::randn(&[4 * d, d], INIT_STD, rng),
            b1: Tensor::zeros(&[1, 4 * d]),
            w2: Tensor::randn(&[d, 4 * d], residual_std, rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }
}

/// Pre-norm causal transformer over token embeddings. Pools the final
/// position and returns a unit-norm projection of it.
#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    width: usize,
    heads: usize,
    max_context: usize,
    positional: Tensor,
    layers: Vec<Layer>,
    ln_final_gain: Tensor,
    ln_final_bias: Tensor,
    projection: Tensor,
}

impl FrozenTextEncoder {
    pub(crate) fn init<R: Rng + ?Sized>(
        width: usize,
        layers: usize,
        heads: usize,
        max_context: usize,
        rng: &mut R,
    ) -> Self {
        let positional = Tensor::randn(&[max_context, width], POSITIONAL_STD, rng);
        let layer_list = (0..layers)
            .map(|_| Layer::init(width, layers, rng))
            .collect();
        let projection = Tensor::randn(&[width, width], 1.0 / (width as f64).sqrt(), rng);
        Self {
            width,
            heads,
            max_context,
            positional,
            layers: layer_list,
            ln_final_gain: Tensor::filled(&[1, width], 1.0),
            ln_final_bias: Tensor::zeros(&[1, width]),
            projection,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.positional];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.ln_final_gain, &self.ln_final_bias, &self.projection]);
        out
    }

    /// Loads every weight onto `tape` as a frozen constant.
    pub fn bind<'a>(&'a self, tape: &mut GradientTape) -> BoundTextEncoder<'a> {
        let vars = self
            .parameters()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        BoundTextEncoder {
            encoder: self,
            vars,
        }
    }

    /// Encodes one token sequence outside of any training graph.
    pub fn encode(&self, sequence: &Tensor) -> Result<Tensor> {
        let mut tape = GradientTape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(sequence.clone());
        let out = bound.encode(&mut tape, x)?;
        tape.ensure_finite()?;
        Ok(tape.value(out).clone())
    }
}

/// A [`FrozenTextEncoder`] whose weights live on a particular tape.
pub struct BoundTextEncoder<'a> {
    encoder: &'a FrozenTextEncoder,
    vars: Vec<Var>,
}

impl BoundTextEncoder<'_> {
    /// Encodes an `n x d` sequence into a `1 x d` unit vector. Gradients
    /// flow to `sequence`; the weights are constants.
    pub fn encode(&self, tape: &mut GradientTape, sequence: Var) -> Result<Var> {
        let enc = self.encoder;
        let (n, d) = {
            let s = tape.value(sequence);
            (s.rows(), s.cols())
        };
        if d != enc.width {
            return Err(Error::Shape(format!(
                "sequence width {d} differs from encoder width {}",
                enc.width
            )));
        }
        if n == 0 || n > enc.max_context {
            return Err(Error::InvalidArgument(format!(
                "sequence length {n} outside 1..={}",
                enc.max_context
            )));
        }
        let pos = tape.slice_rows(self.vars[0], 0, n);
        let mut x = tape.add(sequence, pos);
        for l in 0..enc.layers.len() {
            let v = &self.vars[1 + 16 * l..1 + 16 * (l + 1)];
            let h = tape.layer_norm(x, v[0], v[1]);
            let attn = AttentionVars {
                wq: v[2],
                bq: v[3],
                wk: v[4],
                bk: Some(v[5]),
                wv: v[6],
                bv: v[7],
                wo: v[8],
                bo: v[9],
            };
            let a = self_attention(tape, h, &attn, enc.heads, true);
            x = tape.add(x, a);
            let h = tape.layer_norm(x, v[10], v[11]);
            let h = tape.linear(h, v[12], v[13]);
            let h = tape.gelu(h);
            let h = tape.linear(h, v[14], v[15]);
            x = tape.add(x, h);
        }
        let tail = &self.vars[1 + 16 * enc.layers.len()..];
        let last = tape.row(x, n - 1);
        let last = tape.layer_norm(last, tail[0], tail[1]);
        let proj = tape.matmul_nt(last, tail[2]);
        Ok(tape.l2_normalize_rows(proj))
    }
}
