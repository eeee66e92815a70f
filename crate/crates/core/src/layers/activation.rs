use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SELU_ALPHA: f64 = 1.6732632;
pub const SELU_LAMBDA: f64 = 1.0507009;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU; the subgradient at exactly 0 is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// `lambda * x` for `x > 0`, `lambda * alpha * (e^x - 1)` otherwise.
pub fn selu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (alpha, lambda) = (T::from_f64(SELU_ALPHA), T::from_f64(SELU_LAMBDA));
    x.map(|v| {
        if v > T::zero() {
            lambda * v
        } else {
            lambda * alpha * v.exp_m1()
        }
    })
}

pub fn selu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("selu_backward", x.shape(), grad_out.shape()));
    }
    let (alpha, lambda) = (T::from_f64(SELU_ALPHA), T::from_f64(SELU_LAMBDA));
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            if v > T::zero() {
                g * lambda
            } else {
                g * lambda * alpha * v.exp()
            }
        })
        .collect();
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn selu_values() {
        assert_eq!(selu(&scalar(0.0)).data()[0], 0.0);
        assert!((selu(&scalar(1.0)).data()[0] - 1.0507009).abs() < 1e-12);
        let limit = -SELU_LAMBDA * SELU_ALPHA;
        let at_minus_20 = selu(&scalar(-20.0)).data()[0];
        assert!((at_minus_20 - limit).abs() < 1e-8);
        // the 7-digit constants put lambda*alpha 2e-7 below its full-precision value
        assert!((at_minus_20 - -1.75809934).abs() < 1e-6);
    }

    #[test]
    fn selu_one_sided_derivatives_at_zero() {
        let ones = scalar(1.0);
        let left = selu_backward(&scalar(0.0), &ones).unwrap().data()[0];
        let right = selu_backward(&scalar(1e-300), &ones).unwrap().data()[0];
        assert!((left - SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
        assert!((right - SELU_LAMBDA).abs() < 1e-12);
        let h = 1e-7;
        let fd_left = (selu(&scalar(0.0)).data()[0] - selu(&scalar(-h)).data()[0]) / h;
        let fd_right = (selu(&scalar(h)).data()[0] - selu(&scalar(0.0)).data()[0]) / h;
        assert!((fd_left - SELU_LAMBDA * SELU_ALPHA).abs() < 1e-5);
        assert!((fd_right - SELU_LAMBDA).abs() < 1e-5);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[4], 3.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 3.0, 3.0]);
        assert!(relu_backward(&x, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn finite_difference_gradients() {
        // Points kept away from the kink at 0.
        let x = Tensor::from_fn(&[3, 5], |i| {
            let v = (i as f64 * 0.61).sin() * 2.0;
            if v.abs() < 0.05 {
                v + 0.2
            } else {
                v
            }
        });
        let probe = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).cos());
        let dot = |t: &Tensor<f64>| -> f64 {
            t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };

        let g = selu_backward(&x, &probe).unwrap();
        let n = numerical_gradient(&x, 1e-5, |xp| dot(&selu(xp)));
        assert!(relative_error(g.data(), n.data()) < 1e-4);

        let g = relu_backward(&x, &probe).unwrap();
        let n = numerical_gradient(&x, 1e-5, |xp| dot(&relu(xp)));
        assert!(relative_error(g.data(), n.data()) < 1e-4);
    }
}
