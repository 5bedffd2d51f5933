use rand::Rng;

use crate::nn::{self_attention, AttentionVars};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

const PER_LAYER: usize = 15;

/// Post-norm encoder layer (`x = LN(x + SA(x)); x = LN(x + FF(x))`) with a
/// ReLU feed-forward block and no positional encoding. Keys carry no bias:
/// softmax ignores a per-query constant, so its gradient is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderLayer {
    fn init<R: Rng + ?Sized>(d: usize, ff: usize, std: f64, rng: &mut R) -> Self {
        Self {
            wq: Tensor::randn(&[d, d], std, rng),
            bq: Tensor::zeros(&[1, d]),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::zeros(&[1, d]),
            wo: Tensor::randn(&[d, d], std, rng),
            bo: Tensor::zeros(&[1, d]),
            ln1_gain: Tensor::filled(&[1, d], 1.0),
            ln1_bias: Tensor::zeros(&[1, d]),
            w1: Tensor::randn(&[ff, d], std, rng),
            b1: Tensor::zeros(&[1, ff]),
            w2: Tensor::randn(&[d, ff], std, rng),
            b2: Tensor::zeros(&[1, d]),
            ln2_gain: Tensor::filled(&[1, d], 1.0),
            ln2_bias: Tensor::zeros(&[1, d]),
        }
    }

    fn params(&self) -> [&Tensor; PER_LAYER] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; PER_LAYER] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

const LAYER_NAMES: [&str; PER_LAYER] = [
    "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1.gain", "ln1.bias", "ff1.w", "ff1.b", "ff2.w",
    "ff2.b", "ln2.gain", "ln2.bias",
];

/// Stack of [`EncoderLayer`]s sharing one head count.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerNet {
    pub heads: usize,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerNet {
    pub(crate) fn init<R: Rng + ?Sized>(
        d: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            layers: (0..layers)
                .map(|_| EncoderLayer::init(d, ff, std, rng))
                .collect(),
        }
    }

    pub(crate) fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| LAYER_NAMES.iter().map(move |n| format!("layer{l}.{n}")))
            .collect()
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Zeroes the final layer norm so the stack outputs exactly zero.
    pub(crate) fn zero_output(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.ln2_gain.data_mut().fill(0.0);
            last.ln2_bias.data_mut().fill(0.0);
        }
    }

    pub(crate) fn forward(&self, tape: &mut GradientTape, vars: &[Var], x: Var) -> Var {
        let mut x = x;
        for l in 0..self.layers.len() {
            let v = &vars[l * PER_LAYER..(l + 1) * PER_LAYER];
            let attn = AttentionVars {
                wq: v[0],
                bq: v[1],
                wk: v[2],
                bk: None,
                wv: v[3],
                bv: v[4],
                wo: v[5],
                bo: v[6],
            };
            let a = self_attention(tape, x, &attn, self.heads, false);
            let s = tape.add(x, a);
            x = tape.layer_norm(s, v[7], v[8]);
            let h = tape.linear(x, v[9], v[10]);
            let h = tape.relu(h);
            let h = tape.linear(h, v[11], v[12]);
            let s = tape.add(x, h);
            x = tape.layer_norm(s, v[13], v[14]);
        }
        x
    }
}
