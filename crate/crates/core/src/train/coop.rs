//! Plain context optimization, differentiated by hand at the classifier
//! head. Used as an independent check on the architecture=none path.

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::numerics::class_probs;
use crate::tape::GradientTape;
use crate::tensor::{dot, Tensor};

/// Mean cross-entropy and its gradient with respect to the raw context `v`.
///
/// Each class prompt gets its own tape. The head (softmax over cosine
/// logits) is differentiated in closed form and the per-class row
/// gradients are pulled back through the text encoder with a VJP.
pub fn coop_loss_and_grad(
    backbone: &FrozenBackbone,
    v: &Tensor,
    tokens: &[Tensor],
    features: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Tensor)> {
    let c = tokens.len();
    let b = features.rows();
    if c == 0 || b == 0 || labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "need classes and a non-empty batch ({c} classes, {b} features, {} labels)",
            labels.len()
        )));
    }
    let mut tapes = Vec::with_capacity(c);
    let mut rows = Vec::with_capacity(c);
    for t in tokens {
        let mut tape = GradientTape::new();
        let text = backbone.text_encoder().bind(&mut tape);
        let ctx = tape.param(v.clone());
        let cls = tape.constant(t.clone());
        let seq = tape.concat_rows(&[ctx, cls]);
        let out = text.encode(&mut tape, seq)?;
        rows.push(tape.value(out).data().to_vec());
        tapes.push((tape, ctx, out));
    }

    let d = v.cols();
    let mut row_grads = vec![vec![0.0; d]; c];
    let mut loss = 0.0;
    for n in 0..b {
        let f = features.row(n);
        let sims: Vec<f64> = rows.iter().map(|w| dot(w, f)).collect();
        let p = class_probs(&sims, tau)?;
        let y = labels[n];
        if y >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        loss -= p[y].max(1e-300).ln();
        for i in 0..c {
            let coef = (p[i] - if i == y { 1.0 } else { 0.0 }) / (tau * b as f64);
            for (g, x) in row_grads[i].iter_mut().zip(f) {
                *g += coef * x;
            }
        }
    }
    loss /= b as f64;

    let mut grad = Tensor::zeros(v.shape());
    for ((tape, ctx, out), g) in tapes.iter().zip(row_grads) {
        let grads = tape.backward_with(*out, Tensor::matrix(1, d, g)?)?;
        if let Some(gv) = grads.get(*ctx) {
            grad.axpy(1.0, gv);
        }
    }
    Ok((loss, grad))
}
