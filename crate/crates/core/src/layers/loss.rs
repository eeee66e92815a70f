use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, c] = logits.shape() else {
        return Err(Error::shape("softmax", logits.shape(), &[0, 0]));
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(out)
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * classes + l] = T::one();
    }
    Ok(t)
}

/// Mean softmax cross-entropy over the batch and its gradient `(p_hat - p) / b`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let &[b, c] = logits.shape() else {
        return Err(Error::shape(
            "softmax_cross_entropy",
            logits.shape(),
            labels.shape(),
        ));
    };
    if labels.shape() != logits.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            logits.shape(),
            labels.shape(),
        ));
    }
    if c < 2 {
        return Err(Error::InvalidArgument(
            "cross-entropy needs at least 2 classes".into(),
        ));
    }
    for (i, row) in labels.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::InvalidArgument(format!(
                "label row {i} is not one-hot"
            )));
        }
    }
    let batch = T::from_f64(b as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[b, c]);
    for ((lrow, prow), grow) in logits
        .data()
        .chunks(c)
        .zip(labels.data().chunks(c))
        .zip(grad.data_mut().chunks_mut(c))
    {
        let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for ((&z, &p), g) in lrow.iter().zip(prow).zip(grow.iter_mut()) {
            let log_p_hat = z - log_z;
            if p > T::zero() {
                loss -= p * log_p_hat;
            }
            *g = (log_p_hat.exp() - p) / batch;
        }
    }
    Ok((loss / batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::full(&[3, 10], 0.3);
        let labels = one_hot(&[0, 4, 9], 10).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 3]);
        logits.data_mut()[1] = 200.0;
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(&[1], 3).unwrap()).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn rejects_non_one_hot_rows() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        let mut labels = one_hot::<f32>(&[0, 1], 3).unwrap();
        labels.data_mut()[2] = 1.0;
        assert!(softmax_cross_entropy(&logits, &labels).is_err());
        let half = Tensor::<f32>::full(&[2, 3], 0.5);
        assert!(softmax_cross_entropy(&logits, &half).is_err());
        assert!(softmax_cross_entropy(
            &Tensor::<f32>::zeros(&[2, 1]),
            &one_hot(&[0, 0], 1).unwrap()
        )
        .is_err());
        assert!(one_hot::<f32>(&[3], 3).is_err());
    }

    #[test]
    fn softmax_rows_and_shift_invariance() {
        let logits = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64 * 1.7).sin() * 4.0);
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(5) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let labels = one_hot(&[0, 1, 2, 3], 5).unwrap();
        let (a, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (b, _) = softmax_cross_entropy(&logits.map(|v| v + 17.5), &labels).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_gradient() {
        let logits = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.9).cos() * 2.0);
        let labels = one_hot(&[2, 0, 3], 4).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let n = numerical_gradient(&logits, 1e-5, |z| {
            softmax_cross_entropy(z, &labels).unwrap().0
        });
        assert!(relative_error(g.data(), n.data()) < 1e-4);
    }
}
