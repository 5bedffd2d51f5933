//! Classification-head math, the learning-rate schedule, and a
//! central-difference gradient checker.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::LOG_EPSILON;
use crate::tensor::{dot, Tensor};

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Temperature-scaled softmax over class similarities.
pub fn class_probs(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    if sims.is_empty() {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Negative log-likelihood of one label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// The label's probability fell below [`LOG_EPSILON`] and was floored.
    pub clamped: bool,
}

pub fn cross_entropy_loss(probs: &[f64], label: usize) -> Result<CrossEntropy> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    let clamped = p < LOG_EPSILON;
    if clamped {
        log::warn!("probability {p:e} of label {label} clamped to {LOG_EPSILON:e}");
    }
    Ok(CrossEntropy {
        loss: -p.max(LOG_EPSILON).ln(),
        clamped,
    })
}

/// Cosine annealing from `eta0` down to `eta_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LrSchedule {
    pub eta0: f64,
    pub eta_min: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(eta0: f64, eta_min: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if !(eta0 >= eta_min && eta_min >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need eta0 >= etaMin >= 0, got {eta0} and {eta_min}"
            )));
        }
        Ok(Self {
            eta0,
            eta_min,
            total_steps,
        })
    }

    pub fn rate(&self, step: usize) -> Result<f64> {
        cosine_anneal_rate(self, step)
    }
}

pub fn cosine_anneal_rate(schedule: &LrSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {} steps",
            schedule.total_steps
        )));
    }
    if step == schedule.total_steps {
        return Ok(schedule.eta_min);
    }
    let phase = PI * step as f64 / schedule.total_steps as f64;
    Ok(schedule.eta_min + 0.5 * (schedule.eta0 - schedule.eta_min) * (1.0 + phase.cos()))
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    /// Analytic and central-difference values at `worst_index`.
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// The relative error at each coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`; the maximum is returned.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<GradCheck>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(
            "analytic gradient size differs from params".into(),
        ));
    }
    let mut probe = params.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: f64::NAN,
    };
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::tape::GradientTape;

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine_similarity(&[1., 2., 3.], &[1., 2., 3.]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1., 0.], &[1., 1.]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0., 0.], &[1., 1.]),
            Err(Error::Degenerate(_))
        ));
        assert!(cosine_similarity(&[1.], &[1., 1.]).is_err());
        assert!(cosine_similarity(&[], &[]).is_err());
    }

    #[test]
    fn class_probs_examples() {
        let p = class_probs(&[0.5, 0.5, 0.5], 1.0).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // 1 / (1 + e^-1)
        let p = class_probs(&[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.268_941_421_369_995_1, epsilon = 1e-12);
        let p = class_probs(&[1.0, 0.0], 0.01).unwrap();
        assert!(p[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn class_probs_rejects_bad_tau() {
        assert!(class_probs(&[1.0], 0.0).is_err());
        assert!(class_probs(&[1.0], -1.0).is_err());
        assert!(class_probs(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_loss(&[1., 0., 0.], 0).unwrap().loss, 0.0);
        assert_abs_diff_eq!(
            cross_entropy_loss(&[0.25; 4], 3).unwrap().loss,
            4f64.ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            cross_entropy_loss(&[0.731_058_58, 0.268_941_42], 1)
                .unwrap()
                .loss,
            1.313_261_69,
            epsilon = 1e-8
        );
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let ce = cross_entropy_loss(&[1.0, 0.0], 1).unwrap();
        assert!(ce.clamped);
        assert_abs_diff_eq!(ce.loss, -(1e-12f64).ln(), epsilon = 1e-12);
        assert!(!cross_entropy_loss(&[0.5, 0.5], 1).unwrap().clamped);
        assert!(cross_entropy_loss(&[1.0], 1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(0.002, 0.0, 150).unwrap();
        assert_eq!(s.rate(0).unwrap(), 0.002);
        assert_eq!(s.rate(150).unwrap(), 0.0);
        assert_abs_diff_eq!(s.rate(75).unwrap(), 0.001, epsilon = 1e-15);
        assert!(s.rate(151).is_err());
        let s = LrSchedule::new(0.01, 0.001, 10).unwrap();
        assert_abs_diff_eq!(s.rate(5).unwrap(), 0.0055, epsilon = 1e-15);
        assert!(LrSchedule::new(0.1, 0.0, 0).is_err());
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let grad = p.map(|v| 2.0 * v);
        let r = finite_diff_check(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &p,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn gradcheck_rejects_bad_eps_and_non_finite() {
        let p = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|_| Ok(0.0), &p, &p, 1e-2).is_err());
        assert!(matches!(
            finite_diff_check(|_| Ok(f64::NAN), &p, &p, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradcheck_head_pipeline() {
        // cross-entropy of softmax(cos(W, f) / tau) on a seeded 4-class toy.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let f = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let tau = 0.5;
        let eval = |w: &Tensor, f: &Tensor| {
            let mut tape = GradientTape::new();
            let wv = tape.param(w.clone());
            let fv = tape.param(f.clone());
            let s = tape.cosine_rows(wv, fv);
            let p = tape.class_probs(s, tau);
            let l = tape.nll(p, 2);
            (tape, wv, fv, l)
        };
        let (tape, wv, fv, l) = eval(&w, &f);
        let grads = tape.backward(l).unwrap();
        let gw = grads.get(wv).unwrap().clone();
        let gf = grads.get(fv).unwrap().clone();
        let loss = |w: &Tensor, f: &Tensor| {
            let (tape, _, _, l) = eval(w, f);
            Ok(tape.value(l).data()[0])
        };
        let rw = finite_diff_check(|p| loss(p, &f), &w, &gw, 1e-5).unwrap();
        let rf = finite_diff_check(|p| loss(&w, p), &f, &gf, 1e-5).unwrap();
        assert!(rw.max_rel_error < 1e-4, "{rw:?}");
        assert!(rf.max_rel_error < 1e-4, "{rf:?}");

        // The tape head agrees with the plain functions.
        let sims: Vec<f64> = (0..4)
            .map(|i| cosine_similarity(w.row(i), f.data()).unwrap())
            .collect();
        let probs = class_probs(&sims, tau).unwrap();
        let ce = cross_entropy_loss(&probs, 2).unwrap();
        assert_abs_diff_eq!(ce.loss, tape.value(l).data()[0], epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn probs_sum_to_one(sims in prop::collection::vec(-1.0f64..1.0, 1..1024), tau in 1e-3f64..10.0) {
            let p = class_probs(&sims, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn temperature_keeps_argmax(sims in prop::collection::vec(-1.0f64..1.0, 1..64), tau in 1e-3f64..10.0) {
            let p = class_probs(&sims, tau).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&sims));
        }

        #[test]
        fn probs_preserve_order(sims in prop::collection::vec(-1.0f64..1.0, 2..32), tau in 1e-2f64..10.0) {
            let p = class_probs(&sims, tau).unwrap();
            for i in 0..sims.len() {
                for j in 0..sims.len() {
                    if sims[i] > sims[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(0.1f64..2.0, 3),
            b in prop::collection::vec(-2.0f64..2.0, 3),
            lambda in 0.01f64..100.0,
        ) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let sb = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ab - sb).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn schedule_monotone(total in 1usize..500, eta0 in 1e-4f64..1.0, frac in 0.0f64..1.0) {
            let s = LrSchedule::new(eta0, eta0 * frac, total).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..=total {
                let r = s.rate(t).unwrap();
                prop_assert!(r <= prev + 1e-18);
                prev = r;
            }
        }
    }
}
