//! Classification loss, attention hinge regulariser and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub r_term: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Softmax over class logits followed by negative log-likelihood of `label`.
/// Returns the loss and `softmax - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Domain(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `max(0, 1 - delta * max(u))` with its subgradient.
///
/// The gradient is nonzero only at the (first) argmax of `u`, and only when
/// the hinge is active.
pub fn attention_hinge(u: &Tensor, delta: f64) -> (f64, Tensor) {
    let idx = argmax(u.data());
    let m = u.data()[idx];
    let r = (1.0 - delta * m).max(0.0);
    let mut grad = Tensor::zeros(u.shape());
    if r > 0.0 {
        grad.data_mut()[idx] = -delta;
    }
    (r, grad)
}

pub fn combine(l_class: f64, r_term: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be ≥ 0, got {lambda}")));
    }
    Ok(LossBreakdown {
        l_class,
        r_term,
        total: l_class + lambda * r_term,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradCheck, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let (l, g) = softmax_cross_entropy(&[0.0; 10], 3).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((g[3] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits() {
        let mut z = vec![0.0; 5];
        z[2] = 30.0;
        let (l, _) = softmax_cross_entropy(&z, 2).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn ce_errors() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, f64::NAN], 0),
            Err(Error::Evaluation(_))
        ));
        assert!(softmax_cross_entropy(&[0.0], 0).is_err());
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let report = GradCheck {
            probe_count: 20,
            fd_step: 1e-5,
            seed: 1,
        }
        .run(&[Tensor::vector(z)], |t| {
            let (l, g) = softmax_cross_entropy(t[0].data(), 1)?;
            Ok((l, vec![Tensor::vector(g)]))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn hinge_cases() {
        let u = Tensor::new(vec![1, 2, 2], vec![0.1, 2.0, -1.0, 0.3]).unwrap();
        let (r, g) = attention_hinge(&u, 1.0);
        assert_eq!(r, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let u = Tensor::new(vec![1, 2, 2], vec![0.1, 0.5, -1.0, 0.3]).unwrap();
        let (r, g) = attention_hinge(&u, 1.0);
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(g.data(), &[0.0, -1.0, 0.0, 0.0]);

        let u = Tensor::new(vec![2, 1, 1], vec![-0.2, -0.9]).unwrap();
        let (r, g) = attention_hinge(&u, -1.0);
        assert!((r - 0.8).abs() < 1e-15);
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn hinge_at_margin_has_zero_subgradient() {
        let u = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let (r, g) = attention_hinge(&u, 1.0);
        assert_eq!(r, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hinge_ties_pick_lowest_index() {
        let u = Tensor::new(vec![1, 2, 2], vec![0.2, 0.5, 0.5, 0.1]).unwrap();
        let (_, g) = attention_hinge(&u, 1.0);
        assert_eq!(g.data(), &[0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn combine_cases() {
        assert!((combine(2.0, 0.5, 0.1).unwrap().total - 2.05).abs() < 1e-12);
        assert_eq!(combine(1.7, 3.0, 0.0).unwrap().total, 1.7);
        assert!((combine(0.0, 1.0, 0.1).unwrap().total - 0.1).abs() < 1e-12);
        assert!(combine(1.0, 1.0, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn ce_gradient_sums_to_zero(z in prop::collection::vec(-20.0f64..20.0, 2..12), pick in 0usize..12) {
            let label = pick % z.len();
            let (l, g) = softmax_cross_entropy(&z, label).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn hinge_zero_iff_margin(u in prop::collection::vec(-3.0f64..3.0, 1..20), pos in any::<bool>()) {
            let delta = if pos { 1.0 } else { -1.0 };
            let n = u.len();
            let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let t = Tensor::new(vec![1, 1, n], u).unwrap();
            let (r, g) = attention_hinge(&t, delta);
            prop_assert_eq!(r == 0.0, delta * max >= 1.0);
            let nonzero: Vec<f64> = g.data().iter().copied().filter(|&v| v != 0.0).collect();
            prop_assert!(nonzero.len() <= 1);
            prop_assert!(nonzero.iter().all(|v| v.abs() == 1.0));
        }

        #[test]
        fn combine_total(l in 0.0f64..10.0, r in 0.0f64..10.0, lambda in 0.0f64..2.0) {
            let b = combine(l, r, lambda).unwrap();
            prop_assert!((b.total - (l + lambda * r)).abs() < 1e-12);
        }
    }
}
