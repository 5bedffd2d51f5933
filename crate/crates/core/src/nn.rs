//! Layer building blocks shared by the text encoder and the prompt encoder.

use crate::tape::{GradientTape, Var};

/// Weights of one multi-head self-attention block, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub(crate) fn self_attention(
    tape: &mut GradientTape,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    causal: bool,
) -> Var {
    let d = tape.value(x).cols();
    let head_dim = d / heads;
    let q = tape.linear(x, w.wq, w.bq);
    let k = match w.bk {
        Some(b) => tape.linear(x, w.wk, b),
        None => tape.matmul_nt(x, w.wk),
    };
    let v = tape.linear(x, w.wv, w.bv);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = if causal {
            tape.causal_softmax(scores)
        } else {
            tape.softmax(scores)
        };
        outs.push(tape.matmul(attn, vh));
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    tape.linear(merged, w.wo, w.bo)
}
