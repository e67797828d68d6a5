use crate::error::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// `softmax(logits) − onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for target in 0..4 {
            let (loss, _) = softmax_cross_entropy(&[0.3; 4], target).unwrap();
            assert!((loss - 4f64.ln()).abs() < 1e-12);
        }
        assert!((softmax_cross_entropy(&[0.0; 4], 0).unwrap().0 - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn saturated_margin_has_near_zero_loss() {
        let (loss, _) = softmax_cross_entropy(&[100.0, 0.0], 0).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn matches_frozen_reference() {
        // 40-digit evaluation of log Σ exp(l) − l_t and softmax − onehot.
        let (loss, grad) = softmax_cross_entropy(&[1.0, 2.0, 0.5], 1).unwrap();
        assert!((loss - 0.464_368_784_107_944_84).abs() < 1e-12);
        let want = [0.231_223_897_622_149_07, -0.371_468_280_788_237_55, 0.140_244_383_166_088_48];
        for (g, w) in grad.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_target_is_an_index_error() {
        assert!(matches!(softmax_cross_entropy(&[0.0, 1.0], 2), Err(Error::Index { index: 2, len: 2 })));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0, 5.0, 5.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_gradient_sums_to_zero(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
            t in 0usize..12,
        ) {
            let target = t % logits.len();
            let (loss, grad) = softmax_cross_entropy(&logits, target).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grad.iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}
