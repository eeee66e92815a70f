use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// LeNet-style 2x2/stride-2 subsampling: `coefficient[c] * mean(window) + bias[c]`.
#[derive(Debug, Clone)]
pub struct AvgPoolLayer<T: Scalar = f32> {
    pub coefficients: Tensor<T>,
    pub biases: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct PoolGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub coefficients: Tensor<T>,
    pub biases: Tensor<T>,
}

impl<T: Scalar> AvgPoolLayer<T> {
    /// Unit coefficients and zero biases: a plain 2x2 average at start.
    pub fn new(maps: usize) -> Self {
        Self {
            coefficients: Tensor::full(&[maps], T::one()),
            biases: Tensor::zeros(&[maps]),
        }
    }

    pub fn maps(&self) -> usize {
        self.coefficients.len()
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.maps()
    }

    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        match *x.shape() {
            [b, c, h, w] if c == self.maps() && h % 2 == 0 && w % 2 == 0 => Ok((b, c, h, w)),
            _ => Err(Error::shape("avgpool", x.shape(), &[self.maps()])),
        }
    }

    fn window_means(x: &Tensor<T>, b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let src = x.data();
        let mut means = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..oh {
                let r0 = base + 2 * y * w;
                let r1 = r0 + w;
                for xx in 0..ow {
                    let s = src[r0 + 2 * xx]
                        + src[r0 + 2 * xx + 1]
                        + src[r1 + 2 * xx]
                        + src[r1 + 2 * xx + 1];
                    means.push(s * quarter);
                }
            }
        }
        means
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims(x)?;
        let plane = (h / 2) * (w / 2);
        let mut means = Self::window_means(x, b, c, h, w);
        for (p, chunk) in means.chunks_mut(plane).enumerate() {
            let (coef, bias) = (self.coefficients.data()[p % c], self.biases.data()[p % c]);
            chunk.iter_mut().for_each(|v| *v = coef * *v + bias);
        }
        Tensor::new(&[b, c, h / 2, w / 2], means)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<PoolGrads<T>> {
        let (b, c, h, w) = self.dims(x)?;
        let (oh, ow) = (h / 2, w / 2);
        if grad_out.shape() != [b, c, oh, ow] {
            return Err(Error::shape(
                "avgpool_backward",
                grad_out.shape(),
                &[b, c, oh, ow],
            ));
        }
        let means = Self::window_means(x, b, c, h, w);
        let mut grad_coef = Tensor::zeros(&[c]);
        let mut grad_bias = Tensor::zeros(&[c]);
        let mut grad_x = Tensor::zeros(x.shape());
        let quarter = T::from_f64(0.25);
        let g = grad_out.data();
        for p in 0..b * c {
            let ch = p % c;
            let spread = self.coefficients.data()[ch] * quarter;
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let o = p * oh * ow + y * ow + xx;
                    grad_coef.data_mut()[ch] += g[o] * means[o];
                    grad_bias.data_mut()[ch] += g[o];
                    let d = g[o] * spread;
                    let r0 = base + 2 * y * w + 2 * xx;
                    let gx = grad_x.data_mut();
                    gx[r0] += d;
                    gx[r0 + 1] += d;
                    gx[r0 + w] += d;
                    gx[r0 + w + 1] += d;
                }
            }
        }
        Ok(PoolGrads {
            input: grad_x,
            coefficients: grad_coef,
            biases: grad_bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numerical_gradient, relative_error};

    #[test]
    fn halves_spatial_dims() {
        let p = AvgPoolLayer::<f32>::new(6);
        let out = p.forward(&Tensor::zeros(&[1, 6, 28, 28])).unwrap();
        assert_eq!(out.shape(), &[1, 6, 14, 14]);
        assert_eq!(p.parameter_count(), 12);
        assert_eq!(AvgPoolLayer::<f32>::new(16).parameter_count(), 32);
    }

    #[test]
    fn constant_passes_through() {
        let p = AvgPoolLayer::<f32>::new(2);
        let out = p.forward(&Tensor::full(&[2, 2, 4, 6], 0.75)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn coefficient_and_bias() {
        let mut p = AvgPoolLayer::<f64>::new(1);
        p.coefficients = Tensor::full(&[1], 2.0);
        p.biases = Tensor::full(&[1], 1.0);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn odd_extent_rejected() {
        let p = AvgPoolLayer::<f32>::new(1);
        assert!(p.forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
        assert!(p.forward(&Tensor::zeros(&[1, 2, 4, 4])).is_err());
    }

    #[test]
    fn finite_difference_gradients() {
        let mut p = AvgPoolLayer::<f64>::new(3);
        p.coefficients = Tensor::from_fn(&[3], |i| 0.5 + i as f64);
        p.biases = Tensor::from_fn(&[3], |i| i as f64 - 1.0);
        let x = Tensor::from_fn(&[2, 3, 4, 6], |i| ((i * 37) % 17) as f64 / 8.0 - 1.0);
        let probe = Tensor::from_fn(&[2, 3, 2, 3], |i| ((i * 13) % 7) as f64 - 3.0);
        let loss = |l: &AvgPoolLayer<f64>, x: &Tensor<f64>| -> f64 {
            l.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = p.backward(&x, &probe).unwrap();
        let nx = numerical_gradient(&x, 1e-5, |xp| loss(&p, xp));
        assert!(relative_error(g.input.data(), nx.data()) < 1e-4);
        let nc = numerical_gradient(&p.coefficients, 1e-5, |cp| {
            let mut l = p.clone();
            l.coefficients = cp.clone();
            loss(&l, &x)
        });
        assert!(relative_error(g.coefficients.data(), nc.data()) < 1e-4);
        let nb = numerical_gradient(&p.biases, 1e-5, |bp| {
            let mut l = p.clone();
            l.biases = bp.clone();
            loss(&l, &x)
        });
        assert!(relative_error(g.biases.data(), nb.data()) < 1e-4);
    }
}
