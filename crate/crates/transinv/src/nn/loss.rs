//! Softmax cross-entropy with max-subtraction for stability.

use super::NnError;
use crate::tensor::{Scalar, ShapeError, Tensor};

/// Row-wise softmax of a [N, classes] tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (_, classes) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over the batch plus its gradient
/// (softmax - onehot) / N with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<(T, Tensor<T>), NnError> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(ShapeError::DimMismatch {
            context: "label count",
            expected: n,
            got: labels.len(),
        }
        .into());
    }
    for (row, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(NnError::LabelOutOfRange {
                label: label as usize,
                row,
                classes,
            });
        }
    }
    let mut grad = softmax_rows(logits)?;
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss_acc = 0.0f64;
    for (row, &label) in grad.data_mut().chunks_mut(classes).zip(labels) {
        let p = row[label as usize];
        loss_acc -= p.to_f64().max(f64::MIN_POSITIVE).ln();
        row[label as usize] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((T::from_f64(loss_acc / n as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_ln_ten() {
        let logits = Tensor::filled(&[2, 10], 0.7f64);
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 9]).unwrap();
        assert!((loss - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_near_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[4] = 50.0f64;
        let (loss, grad) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data()[4].abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 10]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(NnError::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_stable_under_large_logits() {
        let logits = Tensor::from_vec(&[1, 3], vec![1e4f64, -1e4, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
        assert!(grad.all_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = Tensor::from_vec(
            &[2, 10],
            (0..20).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
        )
        .unwrap();
        let labels = [2u8, 7];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..20 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let (lp, _) = softmax_cross_entropy(&p, &labels).unwrap();
            let (lm, _) = softmax_cross_entropy(&m, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let a = grad.data()[i];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4,
                "logit {i}"
            );
        }
    }
}
