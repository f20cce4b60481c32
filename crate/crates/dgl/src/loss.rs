//! Cross-entropy over logits, with its gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy of `logits` (flattened per sample to `classes` values)
/// against integer labels, and the gradient w.r.t. the logits.
///
/// The gradient is `(softmax - onehot) / batch`, shaped like the input.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let batch = logits.batch();
    let classes = logits.sample_len();
    if labels.len() != batch {
        return Err(Error::shape(
            "cross entropy",
            format!("{batch} labels"),
            format!("{} labels", labels.len()),
        ));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("cross entropy on empty logits".into()));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let inv_b = T::from_f64(1.0 / batch as f64);
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.sample(b);
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut sum_exp = T::zero();
        for v in row {
            sum_exp = sum_exp + (*v - max).exp();
        }
        let log_sum = sum_exp.ln();
        total = total + log_sum - (row[label] - max);
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (c, v) in row.iter().enumerate() {
            let p = ((*v - max).exp()) / sum_exp;
            g[c] = if c == label { (p - T::one()) * inv_b } else { p * inv_b };
        }
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Number of rows whose argmax equals the label.
pub fn correct_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.sample_len();
    labels
        .iter()
        .enumerate()
        .filter(|(b, &label)| {
            let row = logits.sample(*b);
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::zeros([3, 10, 1, 1]);
        let (loss, _) = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_near_zero_loss() {
        let mut logits = Tensor::<f64>::zeros([1, 10, 1, 1]);
        logits.data_mut()[3] = 50.0;
        let (loss, _) = cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-12, "loss = {loss}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::seed::rng(3, "ce-test", 0);
        use rand::Rng;
        let logits = Tensor::<f64>::from_fn([4, 3, 1, 1], |_, _, _, _| rng.random_range(-2.0..2.0));
        let labels = [0usize, 2, 1, 2];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let (lp, _) = cross_entropy(&plus, &labels).unwrap();
            let (lm, _) = cross_entropy(&minus, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (grad.data()[i] - fd).abs() / (fd.abs() + 1e-8);
            assert!(rel < 1e-4, "index {i}: analytic {} vs fd {fd}", grad.data()[i]);
        }
    }

    #[test]
    fn out_of_range_label_fails() {
        let logits = Tensor::<f32>::zeros([1, 3, 1, 1]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits = Tensor::<f32>::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(correct_count(&logits, &[0, 1]), 2);
        assert_eq!(correct_count(&logits, &[1, 1]), 1);
    }
}
