use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::finite_diff_check;

fn context(m: usize, d: usize, seed: u64) -> PromptContext {
    PromptContext::new(Tensor::randn(
        &[m, d],
        0.5,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
    .unwrap()
}

fn config(arch: Architecture) -> EncoderConfig {
    EncoderConfig {
        seed: 11,
        ..EncoderConfig::new(arch)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn none_is_identity() {
    let enc = PromptEncoder::new(config(Architecture::None), 8, 4).unwrap();
    let v = context(4, 8, 1);
    assert_eq!(&enc.reparameterize(&v, Mode::Eval).unwrap(), v.vectors());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        &enc.reparameterize(&v, Mode::Train(&mut rng)).unwrap(),
        v.vectors()
    );
}

#[test]
fn zero_output_with_residual_is_identity() {
    for arch in [
        Architecture::Bilstm,
        Architecture::Mlp,
        Architecture::Transformer,
    ] {
        for sharing in [Sharing::Shared, Sharing::Separate] {
            let cfg = EncoderConfig {
                identity_start: true,
                sharing,
                ..config(arch)
            };
            let enc = PromptEncoder::new(cfg.clone(), 8, 4).unwrap();
            let v = context(4, 8, 2);
            let out = enc.reparameterize(&v, Mode::Eval).unwrap();
            assert_eq!(&out, v.vectors(), "{arch} {sharing}");
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = enc.reparameterize(&v, Mode::Train(&mut rng)).unwrap();
            assert_eq!(&out, v.vectors(), "{arch} {sharing} training");

            let no_res = PromptEncoder::new(
                EncoderConfig {
                    residual: false,
                    ..cfg
                },
                8,
                4,
            )
            .unwrap();
            let out = no_res.reparameterize(&v, Mode::Eval).unwrap();
            assert!(out.data().iter().all(|&x| x == 0.0), "{arch} {sharing}");
        }
    }
}

#[test]
fn shape_preserved() {
    for arch in Architecture::ALL {
        for (m, sharing) in [
            (1, Sharing::Shared),
            (3, Sharing::Shared),
            (3, Sharing::Separate),
        ] {
            let enc = PromptEncoder::new(
                EncoderConfig {
                    sharing,
                    ..config(arch)
                },
                6,
                m,
            )
            .unwrap();
            let out = enc.reparameterize(&context(m, 6, 3), Mode::Eval).unwrap();
            assert_eq!(out.shape(), &[m, 6]);
        }
    }
}

#[test]
fn width_mismatch_rejected() {
    let enc = PromptEncoder::new(config(Architecture::Mlp), 8, 4).unwrap();
    assert!(enc.reparameterize(&context(4, 6, 1), Mode::Eval).is_err());
    let sep = PromptEncoder::new(
        EncoderConfig {
            sharing: Sharing::Separate,
            ..config(Architecture::Mlp)
        },
        8,
        4,
    )
    .unwrap();
    assert!(sep.reparameterize(&context(3, 8, 1), Mode::Eval).is_err());
}

#[test]
fn bilstm_zero_network_outputs_zero() {
    let mut enc = PromptEncoder::new(config(Architecture::Bilstm), 6, 3).unwrap();
    for t in enc.parameters_mut() {
        t.data_mut().fill(0.0);
    }
    let out = enc.bilstm_apply(context(3, 6, 4).vectors()).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn bilstm_odd_width_rejected() {
    assert!(PromptEncoder::new(config(Architecture::Bilstm), 7, 3).is_err());
}

fn set_bilstm(enc: &mut PromptEncoder, f: impl Fn(&mut BiLstm)) {
    match &mut enc.nets_mut()[0] {
        EncoderNet::Bilstm(b) => f(b),
        _ => unreachable!(),
    }
}

/// Scalar LSTM step with hidden size 1 and input size 2.
fn lstm_step(cell: &LstmCell, x: [f64; 2], h: f64, c: f64) -> (f64, f64) {
    let gate = |k: usize| {
        cell.w_ih.get(k, 0) * x[0]
            + cell.w_ih.get(k, 1) * x[1]
            + cell.b_ih.data()[k]
            + cell.w_hh.get(k, 0) * h
            + cell.b_hh.data()[k]
    };
    let i = sigmoid(gate(0));
    let f = sigmoid(gate(1));
    let g = gate(2).tanh();
    let o = sigmoid(gate(3));
    let c = f * c + i * g;
    (o * c.tanh(), c)
}

#[test]
fn bilstm_matches_hand_unrolled_recurrence() {
    let mut enc = PromptEncoder::new(config(Architecture::Bilstm), 2, 2).unwrap();
    set_bilstm(&mut enc, |b| {
        b.forward.w_ih =
            Tensor::matrix(4, 2, vec![0.5, -0.3, 0.2, 0.8, -0.6, 0.4, 0.1, 0.9]).unwrap();
        b.forward.w_hh = Tensor::matrix(4, 1, vec![0.7, -0.2, 0.3, 0.5]).unwrap();
        b.forward.b_ih = Tensor::matrix(1, 4, vec![0.1, 0.2, -0.1, 0.0]).unwrap();
        b.forward.b_hh = Tensor::matrix(1, 4, vec![0.05, -0.05, 0.2, 0.1]).unwrap();
        b.backward.w_ih =
            Tensor::matrix(4, 2, vec![-0.4, 0.6, 0.3, -0.7, 0.9, 0.1, -0.2, 0.5]).unwrap();
        b.backward.w_hh = Tensor::matrix(4, 1, vec![-0.3, 0.4, 0.6, -0.8]).unwrap();
        b.backward.b_ih = Tensor::matrix(1, 4, vec![0.0, 0.3, 0.1, -0.2]).unwrap();
        b.backward.b_hh = Tensor::matrix(1, 4, vec![0.2, 0.0, -0.3, 0.1]).unwrap();
    });
    let v = Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
    let out = enc.bilstm_apply(&v).unwrap();

    let EncoderNet::Bilstm(b) = &enc.nets()[0] else {
        unreachable!()
    };
    let x0 = [1.0, -0.5];
    let x1 = [0.25, 2.0];
    let (hf0, cf0) = lstm_step(&b.forward, x0, 0.0, 0.0);
    let (hf1, _) = lstm_step(&b.forward, x1, hf0, cf0);
    let (hb1, cb1) = lstm_step(&b.backward, x1, 0.0, 0.0);
    let (hb0, _) = lstm_step(&b.backward, x0, hb1, cb1);
    let expected = [hf0, hb0, hf1, hb1];
    for (a, e) in out.data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

#[test]
fn bilstm_single_token_is_two_independent_steps() {
    let enc = PromptEncoder::new(config(Architecture::Bilstm), 2, 1).unwrap();
    let v = Tensor::matrix(1, 2, vec![0.7, -1.1]).unwrap();
    let out = enc.bilstm_apply(&v).unwrap();
    let EncoderNet::Bilstm(b) = &enc.nets()[0] else {
        unreachable!()
    };
    let (hf, _) = lstm_step(&b.forward, [0.7, -1.1], 0.0, 0.0);
    let (hb, _) = lstm_step(&b.backward, [0.7, -1.1], 0.0, 0.0);
    assert!((out.data()[0] - hf).abs() < 1e-15);
    assert!((out.data()[1] - hb).abs() < 1e-15);
}

#[test]
fn mlp_zero_up_projection() {
    let mut enc = PromptEncoder::new(config(Architecture::Mlp), 8, 4).unwrap();
    enc.zero_output_layers();
    let out = enc
        .mlp_apply(&Tensor::vector(vec![0.3; 8]), Mode::Eval)
        .unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn mlp_eval_deterministic_train_stochastic() {
    let enc = PromptEncoder::new(
        EncoderConfig {
            dropout_rate: 0.5,
            ..config(Architecture::Mlp)
        },
        8,
        4,
    )
    .unwrap();
    let v = Tensor::randn(&[8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let a = enc.mlp_apply(&v, Mode::Eval).unwrap();
    let b = enc.mlp_apply(&v, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = enc.mlp_apply(&v, Mode::Train(&mut rng)).unwrap();
    assert_ne!(a, t);
    // Surviving entries are rescaled by 1 / (1 - p).
    for (x, y) in t.data().iter().zip(a.data()) {
        assert!(*x == 0.0 || (x - 2.0 * y).abs() < 1e-15);
    }
}

#[test]
fn mlp_dead_relu_leaves_up_bias() {
    let cfg = EncoderConfig {
        bottleneck_dim: Some(1),
        ..config(Architecture::Mlp)
    };
    let mut enc = PromptEncoder::new(cfg, 2, 1).unwrap();
    match &mut enc.nets_mut()[0] {
        EncoderNet::Mlp(m) => {
            m.down_w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
            m.down_b = Tensor::matrix(1, 1, vec![-5.0]).unwrap();
            m.up_w = Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap();
            m.up_b = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        }
        _ => unreachable!(),
    }
    // Pre-activation 1 + 1 - 5 = -3, so ReLU blocks the path.
    let out = enc
        .mlp_apply(&Tensor::vector(vec![1.0, 1.0]), Mode::Eval)
        .unwrap();
    assert_eq!(out.data(), &[0.3, -0.7]);
}

#[test]
fn mlp_bottleneck_must_be_positive() {
    let cfg = EncoderConfig {
        bottleneck_dim: Some(0),
        ..config(Architecture::Mlp)
    };
    assert!(PromptEncoder::new(cfg, 8, 4).is_err());
}

#[test]
fn transformer_heads_must_divide_width() {
    let cfg = EncoderConfig {
        transformer_heads: 3,
        ..config(Architecture::Transformer)
    };
    assert!(PromptEncoder::new(cfg, 8, 4).is_err());
}

fn ln(row: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, x)| g.data()[j] * (x - mean) / s + b.data()[j])
        .collect()
}

fn lin(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b.data()[i])
        .collect()
}

#[test]
fn transformer_single_token_reduces_to_value_path() {
    let enc = PromptEncoder::new(config(Architecture::Transformer), 8, 1).unwrap();
    let v = Tensor::randn(&[1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let out = enc.transformer_apply(&v, Mode::Eval).unwrap();
    let EncoderNet::Transformer(net) = &enc.nets()[0] else {
        unreachable!()
    };
    let mut x = v.data().to_vec();
    for l in &net.layers {
        // Softmax over a single key is 1: attention returns the value row.
        let a = lin(&lin(&x, &l.wv, &l.bv), &l.wo, &l.bo);
        let s: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        x = ln(&s, &l.ln1_gain, &l.ln1_bias);
        let h: Vec<f64> = lin(&x, &l.w1, &l.b1)
            .into_iter()
            .map(|z| z.max(0.0))
            .collect();
        let f = lin(&h, &l.w2, &l.b2);
        let s: Vec<f64> = x.iter().zip(&f).map(|(p, q)| p + q).collect();
        x = ln(&s, &l.ln2_gain, &l.ln2_bias);
    }
    for (a, e) in out.data().iter().zip(&x) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn transformer_permutation_equivariant() {
    let enc = PromptEncoder::new(config(Architecture::Transformer), 8, 4).unwrap();
    let v = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let perm = [2, 0, 3, 1];
    let pv =
        Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let out = enc.transformer_apply(&v, Mode::Eval).unwrap();
    let pout = enc.transformer_apply(&pv, Mode::Eval).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in pout.row(k).iter().zip(out.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(out, enc.transformer_apply(&v, Mode::Eval).unwrap());
}

#[test]
fn wrong_architecture_apply_rejected() {
    let enc = PromptEncoder::new(config(Architecture::Mlp), 8, 4).unwrap();
    assert!(enc.bilstm_apply(&Tensor::zeros(&[4, 8])).is_err());
}

#[test]
fn parameter_counts() {
    let ctx = PromptContext::new(Tensor::zeros(&[4, 8])).unwrap();
    let count = |arch, sharing| {
        let enc = PromptEncoder::new(
            EncoderConfig {
                sharing,
                ..config(arch)
            },
            8,
            4,
        )
        .unwrap();
        count_trainable_params(&enc, &ctx)
    };
    assert_eq!(count(Architecture::None, Sharing::Shared), 32);
    assert_eq!(count(Architecture::Bilstm, Sharing::Shared), 480);
    assert_eq!(count(Architecture::Bilstm, Sharing::Separate), 1824);
    // down 4x8 + 4, up 8x4 + 8.
    assert_eq!(count(Architecture::Mlp, Sharing::Shared), 32 + 76);
    // Per layer: q, v 2(64 + 8), k 64, out 64 + 8, two norms 32, ff 32x8 + 32 + 8x32 + 8.
    let per_layer = 2 * 72 + 64 + 72 + 32 + 256 + 32 + 256 + 8;
    assert_eq!(
        count(Architecture::Transformer, Sharing::Shared),
        32 + 2 * per_layer
    );
}

#[test]
fn template_init_copies_embeddings() {
    let vocab = Vocabulary::new(
        ["a", "photo", "of", "cat"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        Tensor::randn(&[4, 6], 0.02, &mut ChaCha8Rng::seed_from_u64(1)),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = PromptContext::init(InitMode::Template, 4, &vocab, &mut rng).unwrap();
    assert_eq!(ctx.vectors(), &vocab.embed_tokens(&TEMPLATE_WORDS).unwrap());
    assert!(PromptContext::init(InitMode::Template, 8, &vocab, &mut rng).is_err());
}

#[test]
fn gaussian_init_std() {
    let vocab = Vocabulary::new(vec!["a".into()], Tensor::zeros(&[1, 32])).unwrap();
    let mut pooled = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = PromptContext::init(InitMode::Gaussian, 4, &vocab, &mut rng).unwrap();
        pooled.extend_from_slice(ctx.vectors().data());
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let std = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.02).abs() < 0.2 * 0.02, "std {std}");
}

/// Checks d(sum(probe * F(V)))/d(V and every encoder tensor), with weights
/// scaled up so the nonlinearities are exercised.
fn gradcheck_reparameterize(cfg: EncoderConfig, m: usize, d: usize) {
    let mut enc = PromptEncoder::new(cfg.clone(), d, m).unwrap();
    for t in enc.parameters_mut() {
        for x in t.data_mut() {
            *x *= 25.0;
        }
    }
    let v = context(m, d, 21);
    let probe = Tensor::randn(&[m, d], 1.0, &mut ChaCha8Rng::seed_from_u64(22));
    let loss = |enc: &PromptEncoder, v: &Tensor| {
        let mut tape = GradientTape::new();
        let vars = enc.bind(&mut tape);
        let c = tape.param(v.clone());
        let out = enc
            .reparameterize_on_tape(&mut tape, &vars, c, &mut Mode::Eval)
            .unwrap();
        let p = tape.constant(probe.clone());
        let prod = tape.mul(out, p);
        let l = tape.sum(prod);
        (tape, vars, c, l)
    };
    let (tape, vars, c, l) = loss(&enc, v.vectors());
    let grads = tape.backward(l).unwrap();
    let gv = grads.get(c).unwrap().clone();
    let r = finite_diff_check(|p| Ok(tape_value(&loss(&enc, p))), v.vectors(), &gv, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{cfg:?} V {r:?}");
    let names: Vec<String> = enc.parameters().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.get(vars.vars()[k]).unwrap().clone();
        let base = enc.parameters()[k].1.clone();
        let r = finite_diff_check(
            |p| {
                let mut e = enc.clone();
                *e.parameters_mut()[k] = p.clone();
                Ok(tape_value(&loss(&e, v.vectors())))
            },
            &base,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{cfg:?} {name} {r:?}");
    }
}

fn tape_value(x: &(GradientTape, EncoderVars, Var, Var)) -> f64 {
    x.0.value(x.3).data()[0]
}

#[test]
fn reparameterize_gradients_all_architectures() {
    for arch in [
        Architecture::Bilstm,
        Architecture::Mlp,
        Architecture::Transformer,
    ] {
        for sharing in [Sharing::Shared, Sharing::Separate] {
            for residual in [true, false] {
                let cfg = EncoderConfig {
                    sharing,
                    residual,
                    dropout_rate: 0.0,
                    ..config(arch)
                };
                gradcheck_reparameterize(cfg, 3, 4);
            }
        }
    }
}
