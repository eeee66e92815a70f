use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_new, Scalar, Tensor};

/// `y = x * W^T + b` on row-major batches `[b, in] -> [b, out]`.
#[derive(Debug, Clone)]
pub struct FcLayer<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FcGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

impl<T: Scalar> FcLayer<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weights: super::glorot(&[outputs, inputs], inputs, outputs, rng),
            biases: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.outputs() * (self.inputs() + 1)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.shape() {
            [b, i] if i == self.inputs() => Ok(b),
            _ => Err(Error::shape("fc_forward", x.shape(), self.weights.shape())),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(x)?;
        let out = self.outputs();
        let mut y = Tensor::from_fn(&[b, out], |i| self.biases.data()[i % out]);
        gemm(T::one(), x, false, &self.weights, true, T::one(), &mut y)?;
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<FcGrads<T>> {
        let b = self.check_input(x)?;
        if grad_out.shape() != [b, self.outputs()] {
            return Err(Error::shape(
                "fc_backward",
                grad_out.shape(),
                &[b, self.outputs()],
            ));
        }
        let out = self.outputs();
        let mut grad_b = Tensor::zeros(&[out]);
        for row in grad_out.data().chunks(out) {
            for (acc, &g) in grad_b.data_mut().iter_mut().zip(row) {
                *acc += g;
            }
        }
        Ok(FcGrads {
            input: gemm_new(grad_out, false, &self.weights, false)?,
            weights: gemm_new(grad_out, true, x, false)?,
            biases: grad_b,
        })
    }
}
